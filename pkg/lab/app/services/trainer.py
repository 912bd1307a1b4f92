"""Training loop: group sampling, teacher pass, weighted student pass, SGD.

One iteration runs exactly two network forwards (one no-gradient teacher
pass on the clean unlabeled batch, one gradient pass on both groups). The
supervised baseline (lam = 0) runs a single forward and never reads
unlabeled data.
"""
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.exceptions import LabError, NonFiniteLossError
from app.models.reports import EvalReport, StepMetrics
from app.models.training import RunMode, TrainConfig
from app.services.autodiff import Tensor, backward, batch_slice, no_grad, softmax
from app.services.checkpoint import checkpoint_dir, save_checkpoint
from app.services.data_synth import Group, GroupSampler, SyntheticDataset, build_sampler
from app.services.losses import make_pseudo, sup_loss, total_loss, uscs_loss
from app.services.metrics import ConfusionMatrix, non_overlap_ratio
from app.services.mimo_model import MimoSegNet
from app.services.uncertainty import weights_from_probs


def poly_lr(base: float, iteration: int, max_iters: int, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iters:
        raise LabError(f"iteration {iteration} outside [0, {max_iters}]")
    return base * (1.0 - iteration / max_iters) ** power


class OptimizerState(BaseModel):
    """Momentum buffer per named parameter and the number of applied steps"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    buffers: Dict[str, np.ndarray] = Field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls(buffers={p.name: np.zeros_like(p.data) for p in params})


def sgd_step(
    params: Sequence[Tensor],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
    lr_scale: Optional[Dict[str, float]] = None,
) -> bool:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.

    Returns False and leaves everything untouched when any gradient is not
    finite.
    """
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not all(np.isfinite(g).all() for g in grads):
        return False
    for p, grad in zip(params, grads):
        if p.name not in state.buffers:
            state.buffers[p.name] = np.zeros_like(p.data)
        v = state.buffers[p.name]
        if v.shape != p.shape:
            raise LabError(f"momentum buffer for {p.name} has shape {v.shape}, parameter has {p.shape}")
        v *= momentum
        v += grad
        if weight_decay:
            v += weight_decay * p.data
        step = lr * (lr_scale or {}).get(p.name, 1.0)
        p.data -= (step * v).astype(p.dtype, copy=False)
    state.iteration += 1
    return True


def lr_multipliers(model: MimoSegNet, head_lr_mult: float) -> Dict[str, float]:
    """Encoder at the base rate, decoder and heads at head_lr_mult times it"""
    encoder = {p.name for p in model.encoder_parameters()}
    return {p.name: (1.0 if p.name in encoder else head_lr_mult) for p in model.parameters()}


def _check_finite(loss: Tensor, iteration: int, cfg: TrainConfig) -> None:
    if not math.isfinite(loss.item()):
        raise NonFiniteLossError(iteration, cfg.to_mapping())


def train_iteration(
    model: MimoSegNet,
    groups: Tuple[Group, Group],
    cfg: TrainConfig,
    rng: np.random.Generator,
    state: OptimizerState,
    iteration: int,
    lr_scale: Optional[Dict[str, float]] = None,
) -> StepMetrics:
    g1, g2 = groups
    non_overlap = None
    weights = (None, None)

    if cfg.mode == RunMode.SUPERVISED:
        logits1, logits2 = model.forward(g1.x_l, g2.x_l, rng)
        sup1, ignored1 = sup_loss(logits1, g1.y_l)
        sup2, ignored2 = sup_loss(logits2, g2.y_l)
        loss, report = total_loss(sup1, sup2, None, None, cfg.lam, all_ignored=ignored1 or ignored2)
    else:
        # teacher pass: crossed, transformed, no gradient
        pseudo1, pseudo2, (teach1, teach2) = make_pseudo(model, g1.x_ul, g1.transform, g2.transform, rng)
        non_overlap = non_overlap_ratio(teach1, teach2)
        if cfg.mode == RunMode.USCS:
            weights = (weights_from_probs(pseudo1.probs, cfg.gamma), weights_from_probs(pseudo2.probs, cfg.gamma))
            if weights[0].mean == 0 or weights[1].mean == 0:
                logger.warning(f"iter {iteration}: an uncertainty mask is all zero; its loss term is 0")

        # student pass on concat(labeled, transformed unlabeled) per branch
        n_l = g1.x_l.shape[0]
        batch1 = np.concatenate([g1.x_l, g1.x_ul_t])
        batch2 = np.concatenate([g2.x_l, g2.x_ul_t])
        logits1, logits2 = model.forward(batch1, batch2, rng)
        sup1, ignored1 = sup_loss(batch_slice(logits1, 0, n_l), g1.y_l)
        sup2, ignored2 = sup_loss(batch_slice(logits2, 0, n_l), g2.y_l)
        uscs1 = uscs_loss(batch_slice(logits1, n_l, logits1.shape[0]), pseudo1, weights[0], cfg.uscs_normalization)
        uscs2 = uscs_loss(batch_slice(logits2, n_l, logits2.shape[0]), pseudo2, weights[1], cfg.uscs_normalization)
        loss, report = total_loss(sup1, sup2, uscs1, uscs2, cfg.lam, weights, ignored1 or ignored2)

    _check_finite(loss, iteration, cfg)
    model.zero_grad()
    backward(loss)
    lr = poly_lr(cfg.base_lr, iteration, cfg.max_iters)
    accepted = sgd_step(model.parameters(), state, lr, cfg.momentum, cfg.weight_decay, lr_scale)
    if not accepted:
        logger.warning(f"iter {iteration}: non-finite gradient, SGD step rejected")
    return StepMetrics(
        iteration=iteration,
        lr=lr,
        losses=report,
        non_overlap=non_overlap,
        coincident=g1.repeated,
        step_rejected=not accepted,
    )


# --- evaluation -----------------------------------------------------------------------


def _evaluate_shard(
    model: MimoSegNet, images: np.ndarray, labels: np.ndarray, num_classes: int, batch: int, seed: int
) -> Tuple[ConfusionMatrix, int, int]:
    rng = np.random.default_rng(seed)
    matrix = ConfusionMatrix(num_classes)
    differing = 0
    for start in range(0, len(images), batch):
        x = images[start:start + batch]
        with no_grad():
            logits1, logits2 = model.forward(x, x, rng)
            prob1, prob2 = softmax(logits1).data, softmax(logits2).data
        pred = np.argmax((prob1 + prob2) / 2, axis=1)
        matrix.update(labels[start:start + batch], pred)
        differing += int((np.argmax(prob1, axis=1) != np.argmax(prob2, axis=1)).sum())
    return matrix, differing, int(labels.size)


def evaluate(
    model: MimoSegNet,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    batch: int = 16,
    workers: Optional[int] = None,
    iteration: int = 0,
) -> EvalReport:
    """mIoU of the averaged heads plus the heads' non-overlap ratio.

    The set is split into contiguous shards evaluated on a thread pool; the
    per-shard confusion matrices are summed.
    """
    workers = max(1, min(workers or settings.worker_count, len(images)))
    bounds = np.linspace(0, len(images), workers + 1).astype(int)
    shards = [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(
            pool.map(
                lambda k: _evaluate_shard(
                    model, images[shards[k][0]:shards[k][1]], labels[shards[k][0]:shards[k][1]], num_classes, batch, k
                ),
                range(len(shards)),
            )
        )
    matrix = ConfusionMatrix(num_classes)
    differing = pixels = 0
    for shard_matrix, shard_diff, shard_pixels in results:
        matrix = matrix.merge(shard_matrix)
        differing += shard_diff
        pixels += shard_pixels
    return EvalReport(
        iteration=iteration,
        miou=matrix.miou(),
        per_class_iou=matrix.iou(),
        pixel_accuracy=matrix.pixel_accuracy(),
        non_overlap=differing / pixels if pixels else 0.0,
        num_images=len(images),
    )


def eval_row(report: EvalReport) -> Dict[str, object]:
    row: Dict[str, object] = {
        "iter": report.iteration,
        "miou": report.miou,
        "pixel_acc": report.pixel_accuracy,
        "non_overlap": report.non_overlap,
    }
    for c, value in enumerate(report.per_class_iou):
        row[f"iou_{c}"] = value
    return row


# --- run driver -------------------------------------------------------------------------


class Trainer:
    """Owns model, data and optimiser state for one run"""

    def __init__(self, cfg: TrainConfig, run_dir: Optional[Path] = None, dataset: Optional[SyntheticDataset] = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dataset = dataset or SyntheticDataset(cfg)
        self.model = MimoSegNet(cfg.mimo(), seed=cfg.init_seed, precision=cfg.precision)
        self.sampler: GroupSampler = build_sampler(cfg, self.dataset)
        self.state = OptimizerState.for_params(self.model.parameters())
        self.lr_scale = lr_multipliers(self.model, cfg.head_lr_mult)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, cfg.sampler_seed]))
        self.history: List[StepMetrics] = []
        self.evaluations: List[EvalReport] = []

    def step(self, iteration: int) -> StepMetrics:
        groups = self.sampler.next_groups(with_unlabeled=self.cfg.mode != RunMode.SUPERVISED)
        started = time.perf_counter()
        metrics = train_iteration(self.model, groups, self.cfg, self.rng, self.state, iteration, self.lr_scale)
        metrics.wall_ms = (time.perf_counter() - started) * 1000.0
        self.history.append(metrics)
        return metrics

    def evaluate(self, iteration: int) -> EvalReport:
        report = evaluate(
            self.model,
            self.dataset.val_images,
            self.dataset.val_labels,
            self.cfg.num_classes,
            batch=self.cfg.eval_batch,
            iteration=iteration,
        )
        self.evaluations.append(report)
        logger.info(
            f"eval iter {iteration}: mIoU {report.miou * 100:.2f}, "
            f"pixel acc {report.pixel_accuracy * 100:.2f}, non-overlap {report.non_overlap * 100:.2f}%"
        )
        return report

    def fit(self) -> EvalReport:
        cfg = self.cfg
        logger.info(f"Training {cfg.mode.value} for {cfg.max_iters} iterations (batch {cfg.batch_size})")
        for iteration in range(cfg.max_iters):
            metrics = self.step(iteration)
            if iteration % cfg.log_every == 0:
                r = metrics.losses
                logger.info(
                    f"iter {iteration}: lr {metrics.lr:.5f} total {r.total:.4f} "
                    f"sup {r.sup1:.4f}/{r.sup2:.4f} uscs {r.uscs1:.4f}/{r.uscs2:.4f}"
                )
            done = iteration + 1
            if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.max_iters:
                self.evaluate(done)
                self.write_tables()
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                self.save(done)
        final = self.evaluate(cfg.max_iters)
        self.save(cfg.max_iters)
        self.write_tables()
        return final

    def save(self, iteration: int) -> None:
        if self.run_dir is None:
            return
        if checkpoint_dir(self.run_dir, iteration).exists():
            return
        save_checkpoint(self.run_dir, iteration, self.model, self.state.buffers, keep=settings.checkpoint_keep)

    def write_tables(self) -> None:
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([m.csv_row() for m in self.history]).to_csv(self.run_dir / "metrics.csv", index=False)
        pd.DataFrame([{"iter": m.iteration, "wall_ms": m.wall_ms} for m in self.history]).to_csv(
            self.run_dir / "timing.csv", index=False
        )
        if self.evaluations:
            pd.DataFrame([eval_row(e) for e in self.evaluations]).to_csv(self.run_dir / "eval.csv", index=False)
            (self.run_dir / "eval.json").write_text(self.evaluations[-1].model_dump_json(indent=2))
