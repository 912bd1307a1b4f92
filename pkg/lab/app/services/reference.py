"""Comparison pipelines for the training-cost table.

``SupervisedOnlyPipeline`` trains one single-head network on labeled data.
``CrossSupervisionPipeline`` trains two independent networks that label the
unlabeled batch for each other, costing two teacher and two student passes
per iteration.
"""
from typing import Dict

import numpy as np

from app.models.data import CutMixSpec
from app.models.training import TrainConfig
from app.services.autodiff import add, backward, batch_slice, no_grad, scale, softmax
from app.services.data_synth import Group
from app.services.losses import PseudoLabel, scs_loss, sup_loss
from app.services.mimo_model import MimoSegNet, SingleSegNet
from app.services.trainer import OptimizerState, poly_lr, sgd_step, train_iteration
from app.services.transforms import apply_cutmix, sample_cutmix


class SupervisedOnlyPipeline:
    def __init__(self, cfg: TrainConfig, seed: int = 0):
        self.cfg = cfg
        self.net = SingleSegNet(cfg.mimo(), seed=seed, precision=cfg.precision)
        self.state = OptimizerState.for_params(self.net.parameters())

    def step(self, x_l: np.ndarray, y_l: np.ndarray, iteration: int = 0) -> float:
        loss, _ = sup_loss(self.net.forward(x_l), y_l)
        self.net.zero_grad()
        backward(loss)
        lr = poly_lr(self.cfg.base_lr, iteration, self.cfg.max_iters)
        sgd_step(self.net.parameters(), self.state, lr, self.cfg.momentum, self.cfg.weight_decay)
        return loss.item()

    @property
    def forward_passes(self) -> int:
        return self.net.counters["forward"]


class CrossSupervisionPipeline:
    """Two separately initialised networks supervising each other"""

    def __init__(self, cfg: TrainConfig, seed: int = 0):
        self.cfg = cfg
        self.nets = (
            SingleSegNet(cfg.mimo(), seed=seed, precision=cfg.precision),
            SingleSegNet(cfg.mimo(), seed=seed + 1, precision=cfg.precision),
        )
        self.states = tuple(OptimizerState.for_params(n.parameters()) for n in self.nets)

    def step(
        self,
        x_l: np.ndarray,
        y_l: np.ndarray,
        x_ul: np.ndarray,
        transform: CutMixSpec,
        iteration: int = 0,
    ) -> float:
        net_a, net_b = self.nets
        with no_grad():
            prob_a = softmax(net_a.forward(x_ul)).data
            prob_b = softmax(net_b.forward(x_ul)).data
        # each network learns from the other's prediction
        target_a = apply_cutmix(prob_b, transform)
        target_b = apply_cutmix(prob_a, transform)
        x = np.concatenate([x_l, apply_cutmix(x_ul, transform)])
        n_l = x_l.shape[0]
        lr = poly_lr(self.cfg.base_lr, iteration, self.cfg.max_iters)
        total = 0.0
        for net, state, target in ((net_a, self.states[0], target_a), (net_b, self.states[1], target_b)):
            logits = net.forward(x)
            sup, _ = sup_loss(batch_slice(logits, 0, n_l), y_l)
            pseudo = PseudoLabel(labels=np.argmax(target, axis=1), probs=target)
            unsup = scs_loss(batch_slice(logits, n_l, logits.shape[0]), pseudo)
            loss = add(sup, scale(unsup, self.cfg.lam))
            net.zero_grad()
            backward(loss)
            sgd_step(net.parameters(), state, lr, self.cfg.momentum, self.cfg.weight_decay)
            total += loss.item()
        return total

    @property
    def forward_passes(self) -> int:
        return sum(n.counters["forward"] for n in self.nets)


def measure_forward_passes(cfg: TrainConfig, batch_size: int = 2, seed: int = 0) -> Dict[str, int]:
    """Run one instrumented iteration of every pipeline on random data"""
    rng = np.random.default_rng(seed)
    size = cfg.canvas_size
    x_l = rng.random((batch_size, cfg.in_channels, size, size)).astype(np.float32)
    y_l = rng.integers(0, cfg.num_classes, size=(batch_size, size, size))
    x_ul = rng.random((batch_size, cfg.in_channels, size, size)).astype(np.float32)
    t1 = sample_cutmix(batch_size, (size, size), rng)
    t2 = sample_cutmix(batch_size, (size, size), rng)

    sup_only = SupervisedOnlyPipeline(cfg, seed)
    sup_only.step(x_l, y_l)

    cps = CrossSupervisionPipeline(cfg, seed)
    cps.step(x_l, y_l, x_ul, t1)

    uscs_cfg = cfg if cfg.lam > 0 else cfg.with_overrides(lam=1.0)
    mimo = MimoSegNet(uscs_cfg.mimo(), seed=seed, precision=uscs_cfg.precision)
    groups = (
        Group(labeled_ids=np.arange(batch_size), x_l=x_l, y_l=y_l, x_ul=x_ul, transform=t1, x_ul_t=apply_cutmix(x_ul, t1)),
        Group(labeled_ids=np.arange(batch_size), x_l=x_l, y_l=y_l, x_ul=x_ul, transform=t2, x_ul_t=apply_cutmix(x_ul, t2)),
    )
    train_iteration(mimo, groups, uscs_cfg, rng, OptimizerState.for_params(mimo.parameters()), 0)
    return {"sup_only": sup_only.forward_passes, "cps": cps.forward_passes, "uscs": mimo.counters["forward"]}
