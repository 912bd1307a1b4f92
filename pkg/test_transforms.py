"""
Tests for CutMix and labeled-data augmentation
"""
import numpy as np
import pytest

from app.exceptions import GeometryMismatchError
from app.models.data import AugmentConfig, CutBox, CutMixSpec
from app.services.transforms import apply_cutmix, augment_labeled, hflip, sample_cutmix


def random_probs(rng, shape):
    logits = rng.normal(size=shape)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_argmax_commutes_with_cutmix():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        p = random_probs(rng, (n, 3, h, w))
        spec = sample_cutmix(n, (h, w), rng)
        np.testing.assert_array_equal(
            np.argmax(apply_cutmix(p, spec), axis=1), apply_cutmix(np.argmax(p, axis=1), spec)
        )


def test_pixels_come_from_partner_inside_box():
    rng = np.random.default_rng(1)
    field = rng.normal(size=(3, 2, 10, 12))
    spec = sample_cutmix(3, (10, 12), rng)
    out = apply_cutmix(field, spec)
    for i, (j, box) in enumerate(zip(spec.partner, spec.boxes)):
        inside = np.zeros((10, 12), dtype=bool)
        inside[box.top:box.top + box.height, box.left:box.left + box.width] = True
        np.testing.assert_array_equal(out[i][:, inside], field[j][:, inside])
        np.testing.assert_array_equal(out[i][:, ~inside], field[i][:, ~inside])


def test_box_sizes_and_partners():
    rng = np.random.default_rng(2)
    ratios = []
    for _ in range(200):
        spec = sample_cutmix(4, (64, 64), rng)
        assert all(p != i for i, p in enumerate(spec.partner))
        ratios.extend(box.area / (64 * 64) for box in spec.boxes)
    assert min(ratios) > 0.2
    assert max(ratios) < 0.56


def test_identity_spec_is_a_no_op():
    field = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    np.testing.assert_array_equal(apply_cutmix(field, CutMixSpec.identity(2, (4, 4))), field)


def test_batch_of_one_pastes_from_itself():
    field = np.random.default_rng(3).normal(size=(1, 3, 5, 5))
    spec = sample_cutmix(1, (5, 5), np.random.default_rng(3))
    np.testing.assert_array_equal(apply_cutmix(field, spec), field)


def test_geometry_mismatch_is_rejected():
    spec = sample_cutmix(2, (8, 8), np.random.default_rng(4))
    with pytest.raises(GeometryMismatchError):
        apply_cutmix(np.zeros((2, 3, 8, 9)), spec)
    with pytest.raises(GeometryMismatchError):
        apply_cutmix(np.zeros((3, 8, 8)), spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        CutMixSpec(image_shape=(4, 4), partner=[0, 1], boxes=[CutBox(top=0, left=0, height=1, width=1)] * 2)
    with pytest.raises(ValueError):
        CutMixSpec(image_shape=(4, 4), partner=[1, 0], boxes=[CutBox(top=3, left=0, height=2, width=1)] * 2)


def test_augment_keeps_image_and_label_aligned():
    rng = np.random.default_rng(5)
    label = np.zeros((32, 32), dtype=np.uint8)
    label[:, 16:] = 2
    image = np.repeat((label / 2.0)[None].astype(np.float32), 3, axis=0)
    cfg = AugmentConfig(crop_size=24, flip_prob=0.5, scale_range=(0.5, 2.0))
    for _ in range(20):
        img, lab = augment_labeled(image, label, cfg, rng)
        assert img.shape == (3, 24, 24) and lab.shape == (24, 24)
        assert set(np.unique(lab)) <= {0, 2}
        # bright pixels sit where the label says class 2, away from the blended edge
        interior = (lab == 2) & (np.roll(lab, 1, axis=1) == 2) & (np.roll(lab, -1, axis=1) == 2)
        if interior.any():
            assert img[0][interior].min() > 0.5


def test_forced_unit_scale_without_flip_is_identity():
    rng = np.random.default_rng(6)
    image = rng.random((3, 16, 16)).astype(np.float32)
    label = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
    cfg = AugmentConfig(crop_size=16, flip_prob=0.0)
    img, lab = augment_labeled(image, label, cfg, rng, scale=1.0, flip=False)
    np.testing.assert_array_equal(img, image)
    np.testing.assert_array_equal(lab, label)
    flipped_img, flipped_lab = augment_labeled(image, label, cfg, rng, scale=1.0, flip=True)
    expected_img, expected_lab = hflip(image, label)
    np.testing.assert_array_equal(flipped_img, expected_img)
    np.testing.assert_array_equal(flipped_lab, expected_lab)


def test_small_scale_is_grown_to_crop():
    rng = np.random.default_rng(7)
    image = rng.random((3, 16, 16)).astype(np.float32)
    label = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
    cfg = AugmentConfig(crop_size=16)
    img, lab = augment_labeled(image, label, cfg, rng, scale=0.5)
    assert img.shape == (3, 16, 16) and lab.shape == (16, 16)
