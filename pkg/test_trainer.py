"""
Tests for the optimiser, one training iteration, checkpoints and short runs
"""
import numpy as np
import pandas as pd
import pytest

from app.exceptions import LabError, NonFiniteLossError
from app.models.data import CutMixSpec
from app.models.training import MimoConfig, TrainConfig
from app.services.autodiff import Tensor, backward, batch_slice, finite_diff_check
from app.services.checkpoint import latest_checkpoint, list_checkpoints, load_checkpoint, save_checkpoint
from app.services.data_synth import Group
from app.services.losses import make_pseudo, sup_loss, total_loss, uscs_loss
from app.services.mimo_model import MimoSegNet
from app.services.trainer import (
    OptimizerState,
    Trainer,
    evaluate,
    lr_multipliers,
    poly_lr,
    sgd_step,
    train_iteration,
)
from app.services.transforms import apply_cutmix, sample_cutmix
from app.services.uncertainty import weights_from_probs


def tiny_train_config(**overrides):
    values = dict(
        max_iters=4,
        batch_size=2,
        num_train=16,
        num_val=4,
        labeled_ratio=0.25,
        canvas_size=16,
        crop_size=16,
        encoder_widths=[4, 8],
        encoder_strides=[2, 2],
        decoder_widths=[8, 4],
        eval_every=2,
        checkpoint_every=2,
        log_every=1,
    )
    values.update(overrides)
    return TrainConfig(**values)


def random_groups(cfg, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    size = cfg.canvas_size
    x_ul = rng.random((batch, cfg.in_channels, size, size))
    groups = []
    for _ in range(2):
        t = sample_cutmix(batch, (size, size), rng)
        groups.append(
            Group(
                labeled_ids=np.arange(batch),
                x_l=rng.random((batch, cfg.in_channels, size, size)),
                y_l=rng.integers(0, cfg.num_classes, size=(batch, size, size)),
                x_ul=x_ul,
                transform=t,
                x_ul_t=apply_cutmix(x_ul, t),
            )
        )
    return tuple(groups)


def param(values, name="p"):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)


def test_poly_lr():
    assert poly_lr(0.01, 0, 100) == 0.01
    assert poly_lr(0.01, 100, 100) == 0.0
    assert poly_lr(0.01, 50, 100) == pytest.approx(0.01 * 0.5 ** 0.9)
    assert poly_lr(0.01, 30, 100) > poly_lr(0.01, 31, 100)
    with pytest.raises(LabError):
        poly_lr(0.01, 101, 100)
    with pytest.raises(LabError):
        poly_lr(0.01, -1, 100)


def test_plain_sgd_step():
    p = param([1.0, -2.0])
    p.grad = np.array([0.5, 0.5])
    state = OptimizerState.for_params([p])
    assert sgd_step([p], state, lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [0.95, -2.05])
    assert state.iteration == 1


def test_momentum_accumulates():
    p = param([0.0])
    state = OptimizerState.for_params([p])
    lr, m, g = 0.1, 0.9, 2.0
    for _ in range(2):
        p.grad = np.array([g])
        sgd_step([p], state, lr, m, 0.0)
    # first step moves lr*g, second lr*(m*g + g)
    assert p.data[0] == pytest.approx(-lr * g * (2 + m))


def test_weight_decay_and_lr_scale():
    p = param([2.0], "head.weight")
    p.grad = np.array([0.0])
    state = OptimizerState.for_params([p])
    sgd_step([p], state, lr=0.1, momentum=0.0, weight_decay=0.5, lr_scale={"head.weight": 10.0})
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 10.0 * 0.5 * 2.0)


def test_non_finite_gradient_is_rejected():
    p = param([1.0, 2.0])
    q = param([3.0], "q")
    state = OptimizerState.for_params([p, q])
    state.buffers["p"][:] = 0.25
    p.grad = np.array([np.nan, 1.0])
    q.grad = np.array([1.0])
    assert not sgd_step([p, q], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(q.data, [3.0])
    np.testing.assert_array_equal(state.buffers["p"], 0.25)
    assert state.iteration == 0


def test_lr_multipliers():
    model = MimoSegNet(tiny_train_config().mimo(), seed=0)
    scales = lr_multipliers(model, 10.0)
    assert scales["encoder.0.weight"] == 1.0
    assert scales["decoder.1.bias"] == 10.0
    assert scales["head2.weight"] == 10.0


def test_uscs_iteration_runs_two_forwards():
    cfg = tiny_train_config(precision="float64")
    model = MimoSegNet(cfg.mimo(), seed=0, precision="float64")
    state = OptimizerState.for_params(model.parameters())
    metrics = train_iteration(model, random_groups(cfg), cfg, np.random.default_rng(0), state, 0)
    assert model.counters["forward"] == 2
    assert model.counters["encoder"] == 4
    assert model.counters["head"] == 4
    assert metrics.non_overlap is not None
    assert metrics.losses.mean_weight is not None
    assert not metrics.step_rejected
    assert state.iteration == 1


def test_supervised_iteration_runs_one_forward():
    cfg = tiny_train_config(lam=0.0)
    model = MimoSegNet(cfg.mimo(), seed=0)
    g1, g2 = random_groups(cfg)
    groups = (g1.model_copy(update={"x_ul": None, "x_ul_t": None, "transform": None}), g2)
    metrics = train_iteration(model, groups, cfg, np.random.default_rng(0), OptimizerState(), 0)
    assert model.counters["forward"] == 1
    assert metrics.losses.uscs1 == 0.0 and metrics.non_overlap is None


def test_zero_lambda_matches_plain_supervised_step():
    cfg = tiny_train_config(lam=0.0, precision="float64")
    groups = random_groups(cfg, seed=3)
    trained = MimoSegNet(cfg.mimo(), seed=1, precision="float64")
    train_iteration(trained, groups, cfg, np.random.default_rng(7), OptimizerState(), 0)

    manual = MimoSegNet(cfg.mimo(), seed=1, precision="float64")
    g1, g2 = groups
    logits1, logits2 = manual.forward(g1.x_l, g2.x_l, np.random.default_rng(7))
    loss = total_loss(sup_loss(logits1, g1.y_l)[0], sup_loss(logits2, g2.y_l)[0], None, None, 0.0)[0]
    backward(loss)
    sgd_step(manual.parameters(), OptimizerState(), cfg.base_lr, cfg.momentum, cfg.weight_decay)

    for name, p in trained.named_parameters().items():
        np.testing.assert_array_equal(p.data, manual.named_parameters()[name].data)


def test_full_objective_gradients_match_finite_differences():
    config = MimoConfig(
        in_channels=3,
        num_classes=2,
        encoder_widths=[4],
        encoder_strides=[2],
        decoder_widths=[4],
        input_size=(8, 8),
    )
    model = MimoSegNet(config, seed=4, precision="float64")
    # zero biases put pre-activations on the ReLU kink; move to a smooth point
    bias_rng = np.random.default_rng(9)
    for name, p in model.named_parameters().items():
        if name.endswith(".bias"):
            p.data[:] = bias_rng.uniform(0.05, 0.2, size=p.shape)
    rng = np.random.default_rng(5)
    x_l1, x_l2 = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    y_l1, y_l2 = rng.integers(0, 2, size=(2, 8, 8)), rng.integers(0, 2, size=(2, 8, 8))
    x_ul = rng.random((2, 3, 8, 8))
    t1, t2 = sample_cutmix(2, (8, 8), rng), sample_cutmix(2, (8, 8), rng)
    pseudo1, pseudo2, _ = make_pseudo(model, x_ul, t1, t2, np.random.default_rng(6))
    w1, w2 = weights_from_probs(pseudo1.probs, 0.5), weights_from_probs(pseudo2.probs, 0.5)
    batch1 = np.concatenate([x_l1, apply_cutmix(x_ul, t1)])
    batch2 = np.concatenate([x_l2, apply_cutmix(x_ul, t2)])

    def objective():
        logits1, logits2 = model.forward(batch1, batch2, np.random.default_rng(8))
        sup1, _ = sup_loss(batch_slice(logits1, 0, 2), y_l1)
        sup2, _ = sup_loss(batch_slice(logits2, 0, 2), y_l2)
        u1 = uscs_loss(batch_slice(logits1, 2, 4), pseudo1, w1)
        u2 = uscs_loss(batch_slice(logits2, 2, 4), pseudo2, w2)
        return total_loss(sup1, sup2, u1, u2, 1.0, (w1, w2))[0]

    assert finite_diff_check(objective, model.parameters(), eps=1e-5) < 1e-4


def test_non_finite_loss_names_the_config():
    cfg = tiny_train_config(lam=0.0)
    model = MimoSegNet(cfg.mimo(), seed=0)
    model.named_parameters()["head1.bias"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train_iteration(model, random_groups(cfg), cfg, np.random.default_rng(0), OptimizerState(), 2)
    assert info.value.iteration == 2
    assert info.value.config["rho"] == cfg.to_mapping()["rho"]


def test_evaluate_ignores_worker_count():
    cfg = tiny_train_config()
    model = MimoSegNet(cfg.mimo(), seed=0)
    rng = np.random.default_rng(9)
    images = rng.random((5, 3, 16, 16)).astype(np.float32)
    labels = rng.integers(0, 4, size=(5, 16, 16))
    one = evaluate(model, images, labels, 4, batch=2, workers=1)
    three = evaluate(model, images, labels, 4, batch=2, workers=3)
    assert one.miou == three.miou
    assert one.non_overlap == three.non_overlap
    assert one.num_images == 5


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_train_config()
    model = MimoSegNet(cfg.mimo(), seed=0)
    momentum = {p.name: np.full(p.shape, 0.5, dtype=np.float32) for p in model.parameters()}
    for iteration in (2, 4, 6):
        save_checkpoint(tmp_path, iteration, model, momentum, keep=2)
    assert [p.name for p in list_checkpoints(tmp_path)] == ["iter_000004", "iter_000006"]

    other = MimoSegNet(cfg.mimo(), seed=1)
    restored = load_checkpoint(latest_checkpoint(tmp_path), other)
    assert restored["iteration"] == 6
    for name, p in model.named_parameters().items():
        np.testing.assert_array_equal(other.named_parameters()[name].data, p.data)
    np.testing.assert_array_equal(restored["momentum"]["head1.weight"], 0.5)


def test_checkpoint_rejects_other_architecture(tmp_path):
    cfg = tiny_train_config()
    save_checkpoint(tmp_path, 1, MimoSegNet(cfg.mimo(), seed=0))
    wider = MimoSegNet(cfg.with_overrides(decoder_widths=[8, 6]).mimo(), seed=0)
    with pytest.raises(LabError):
        load_checkpoint(latest_checkpoint(tmp_path), wider)
    with pytest.raises(LabError):
        load_checkpoint(tmp_path / "missing", wider)


def test_tiny_fit_writes_tables(tmp_path):
    trainer = Trainer(tiny_train_config(), run_dir=tmp_path)
    final = trainer.fit()
    assert 0.0 <= final.miou <= 1.0
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics["iter"]) == [0, 1, 2, 3]
    assert "wall_ms" not in metrics.columns
    assert (tmp_path / "timing.csv").is_file()
    assert list(pd.read_csv(tmp_path / "eval.csv")["iter"]) == [2, 4]
    assert (tmp_path / "eval.json").is_file()
    assert latest_checkpoint(tmp_path).name == "iter_000004"


def test_tiny_fit_is_deterministic(tmp_path):
    cfg = tiny_train_config(precision="float64")
    for name in ("a", "b"):
        Trainer(cfg, run_dir=tmp_path / name).fit()
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / "a" / "metrics.csv"), pd.read_csv(tmp_path / "b" / "metrics.csv"))


def test_supervised_fit_never_reads_unlabeled():
    trainer = Trainer(tiny_train_config(lam=0.0, max_iters=3, eval_every=0))
    trainer.fit()
    assert trainer.sampler.unlabeled is None
    assert trainer.sampler.unlabeled_reads == 0


def test_identity_cutmix_is_accepted_by_iteration():
    cfg = tiny_train_config()
    g1, g2 = random_groups(cfg)
    identity = CutMixSpec.identity(2, (16, 16))
    g1 = g1.model_copy(update={"transform": identity, "x_ul_t": g1.x_ul})
    model = MimoSegNet(cfg.mimo(), seed=0)
    metrics = train_iteration(model, (g1, g2), cfg, np.random.default_rng(0), OptimizerState(), 0)
    assert np.isfinite(metrics.losses.total)


@pytest.mark.slow
def test_semi_supervised_beats_supervised_baseline():
    base = TrainConfig.from_file("lab/configs/toy.conf")
    gains = []
    for seed in range(3):
        seeds = {"init_seed": seed, "sampler_seed": seed}
        uscs = Trainer(base.with_overrides(**seeds)).fit().miou
        sup = Trainer(base.with_overrides(lam=0.0, **seeds)).fit().miou
        gains.append(uscs - sup)
    assert np.mean(gains) * 100 >= 2.0
