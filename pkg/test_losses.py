"""
Tests for the supervised, cross supervision and uncertainty-weighted losses
"""
import math

import numpy as np
import pytest

from app.exceptions import ShapeMismatchError
from app.models.data import CutMixSpec
from app.models.training import MimoConfig
from app.services.autodiff import Tensor, backward, softmax
from app.services.losses import (
    IGNORE_INDEX,
    PseudoLabel,
    make_pseudo,
    pixel_cross_entropy,
    scs_loss,
    sup_loss,
    total_loss,
    uscs_loss,
)
from app.services.mimo_model import MimoSegNet
from app.services.transforms import apply_cutmix, sample_cutmix
from app.services.uncertainty import WeightMask


def logits_param(array):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, name="logits")


def pseudo_of(labels):
    labels = np.asarray(labels)
    return PseudoLabel(labels=labels, probs=np.zeros((labels.shape[0], 1) + labels.shape[1:]))


def mask_of(values, gamma=0.5):
    return WeightMask(values=np.asarray(values, dtype=np.float64), gamma=gamma)


def test_uniform_logits_give_log_num_classes():
    logits = Tensor(np.zeros((2, 2, 3, 3)))
    labels = np.random.default_rng(0).integers(0, 2, size=(2, 3, 3))
    loss, all_ignored = sup_loss(logits, labels)
    assert loss.item() == pytest.approx(math.log(2))
    assert not all_ignored


def test_confident_correct_prediction_has_no_loss():
    labels = np.array([[[0, 1], [2, 1]]])
    logits = np.full((1, 3, 2, 2), -50.0)
    for r in range(2):
        for s in range(2):
            logits[0, labels[0, r, s], r, s] = 50.0
    loss, _ = sup_loss(Tensor(logits), labels)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_hand_values():
    logits = np.array([1.0, 2.0, 0.0]).reshape(1, 3, 1, 1)
    ce, valid = pixel_cross_entropy(Tensor(logits), np.array([[[1]]]))
    expected = -(2.0 - math.log(math.e + math.e ** 2 + 1.0))
    assert ce.data[0, 0, 0] == pytest.approx(expected)
    assert valid.all()


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    logits = logits_param(rng.normal(size=(2, 3, 2, 2)))
    labels = rng.integers(0, 3, size=(2, 2, 2))
    loss, _ = sup_loss(logits, labels)
    grads = backward(loss)
    onehot = np.eye(3)[labels].transpose(0, 3, 1, 2)
    np.testing.assert_allclose(grads["logits"], (softmax(Tensor(logits.data)).data - onehot) / 8, atol=1e-12)


def test_ignored_pixels_do_not_count():
    logits = Tensor(np.random.default_rng(2).normal(size=(1, 3, 2, 2)))
    labels = np.array([[[0, IGNORE_INDEX], [2, 1]]])
    loss, _ = sup_loss(logits, labels)
    ce, _ = pixel_cross_entropy(logits, np.array([[[0, 0], [2, 1]]]))
    assert loss.item() == pytest.approx((ce.data[0, 0, 0] + ce.data[0, 1, 0] + ce.data[0, 1, 1]) / 3)


def test_all_ignored_batch_gives_zero():
    logits = logits_param(np.ones((1, 2, 2, 2)))
    loss, all_ignored = sup_loss(logits, np.full((1, 2, 2), IGNORE_INDEX))
    assert loss.item() == 0.0
    assert all_ignored
    np.testing.assert_array_equal(backward(loss)["logits"], 0.0)


def test_unit_weights_reduce_to_plain_cross_supervision():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(2, 4, 5, 5)))
    labels = rng.integers(0, 4, size=(2, 5, 5))
    pseudo = pseudo_of(labels)
    weighted = uscs_loss(logits, pseudo, mask_of(np.ones((2, 5, 5)))).item()
    assert weighted == scs_loss(logits, pseudo).item()
    assert weighted == sup_loss(logits, labels)[0].item()
    assert weighted == uscs_loss(logits, pseudo, None).item()


def test_zero_weights_give_zero_loss():
    logits = logits_param(np.random.default_rng(4).normal(size=(1, 3, 2, 2)))
    loss = uscs_loss(logits, pseudo_of(np.zeros((1, 2, 2), dtype=int)), mask_of(np.zeros((1, 2, 2))))
    assert loss.item() == 0.0
    np.testing.assert_array_equal(backward(loss)["logits"], 0.0)


def test_two_pixel_weighted_average():
    logits = Tensor(np.random.default_rng(5).normal(size=(1, 2, 1, 2)))
    pseudo = pseudo_of(np.array([[[0, 1]]]))
    ce, _ = pixel_cross_entropy(logits, pseudo.labels)
    a, b = ce.data[0, 0]
    loss = uscs_loss(logits, pseudo, mask_of(np.array([[[1.0, 0.5]]])))
    assert loss.item() == pytest.approx((a + 0.5 * b) / 1.5)


def test_weight_scale_invariance():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.normal(size=(2, 3, 4, 4)))
    pseudo = pseudo_of(rng.integers(0, 3, size=(2, 4, 4)))
    w = rng.random((2, 4, 4))
    base = uscs_loss(logits, pseudo, mask_of(w)).item()
    assert uscs_loss(logits, pseudo, mask_of(w * 7.5)).item() == pytest.approx(base)


def test_zero_weight_matches_ignored_pixel():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(1, 3, 3, 3)))
    labels = rng.integers(0, 3, size=(1, 3, 3))
    w = np.ones((1, 3, 3))
    w[0, 1, 2] = 0.0
    ignored = labels.copy()
    ignored[0, 1, 2] = IGNORE_INDEX
    weighted = uscs_loss(logits, pseudo_of(labels), mask_of(w)).item()
    assert weighted == pytest.approx(sup_loss(logits, ignored)[0].item())


def test_literal_normalization_divides_by_pixel_count():
    rng = np.random.default_rng(8)
    logits = Tensor(rng.normal(size=(2, 3, 4, 5)))
    pseudo = pseudo_of(rng.integers(0, 3, size=(2, 4, 5)))
    w = mask_of(rng.random((2, 4, 5)))
    weighted = uscs_loss(logits, pseudo, w).item()
    assert uscs_loss(logits, pseudo, w, normalization="literal").item() == pytest.approx(weighted / 20)


def test_weight_shape_must_match():
    logits = Tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ShapeMismatchError):
        uscs_loss(logits, pseudo_of(np.zeros((1, 3, 3), dtype=int)), mask_of(np.ones((1, 3, 2))))


def test_total_loss_arithmetic():
    total, report = total_loss(
        Tensor(np.array(1.0)),
        Tensor(np.array(1.0)),
        Tensor(np.array(0.5)),
        Tensor(np.array(0.5)),
        lam=2.0,
        weights=(mask_of(np.ones(4)), mask_of(np.array([1.0, 1.0, 0.0, 0.0]))),
    )
    assert total.item() == pytest.approx(4.0)
    assert report.total == pytest.approx(4.0)
    assert report.mean_weight == pytest.approx(0.75)
    assert report.confident_fraction == pytest.approx(0.75)


def test_total_loss_without_unlabeled_terms():
    total, report = total_loss(Tensor(np.array(0.3)), Tensor(np.array(0.2)), None, None, lam=5.0)
    assert total.item() == pytest.approx(0.5)
    assert report.uscs1 == 0.0 and report.mean_weight is None


@pytest.fixture
def tiny_model():
    config = MimoConfig(
        in_channels=3,
        num_classes=3,
        encoder_widths=[4, 8],
        encoder_strides=[2, 1],
        decoder_widths=[4],
        input_size=(8, 8),
    )
    return MimoSegNet(config, seed=0, precision="float64")


def test_pseudo_labels_are_crossed(tiny_model):
    x = np.random.default_rng(9).random((2, 3, 8, 8))
    identity = CutMixSpec.identity(2, (8, 8))
    pseudo1, pseudo2, (argmax1, argmax2) = make_pseudo(tiny_model, x, identity, identity, np.random.default_rng(0))
    # branch 1 learns from head 2 and the other way round
    np.testing.assert_array_equal(pseudo1.labels, argmax2)
    np.testing.assert_array_equal(pseudo2.labels, argmax1)
    np.testing.assert_allclose(pseudo1.probs.sum(axis=1), 1.0)


def test_pseudo_labels_follow_their_transform(tiny_model):
    rng = np.random.default_rng(10)
    x = rng.random((3, 3, 8, 8))
    t1 = sample_cutmix(3, (8, 8), rng)
    t2 = sample_cutmix(3, (8, 8), rng)
    pseudo1, pseudo2, (argmax1, argmax2) = make_pseudo(tiny_model, x, t1, t2, np.random.default_rng(0))
    np.testing.assert_array_equal(pseudo1.labels, apply_cutmix(argmax2, t1))
    np.testing.assert_array_equal(pseudo2.labels, apply_cutmix(argmax1, t2))


def test_teacher_pass_builds_no_graph(tiny_model):
    x = np.random.default_rng(11).random((1, 3, 8, 8))
    identity = CutMixSpec.identity(1, (8, 8))
    pseudo1, _, _ = make_pseudo(tiny_model, x, identity, identity, np.random.default_rng(0))
    assert isinstance(pseudo1.probs, np.ndarray)
    assert tiny_model.counters["forward"] == 1

    student = logits_param(np.zeros((1, 3, 8, 8)))
    grads = backward(uscs_loss(student, pseudo1))
    assert set(grads) == {"logits"}
