"""Supervised, self cross supervision and uncertainty-guided losses.

All cross-entropy terms go through ``pixel_cross_entropy`` followed by a
weighted mean, so the unweighted unlabeled loss and the supervised loss are
the same computation on identical inputs.
"""
from typing import Literal, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from app.exceptions import LabError, ShapeMismatchError
from app.models.data import CutMixSpec
from app.models.reports import LossReport
from app.services.autodiff import (
    Tensor,
    add,
    log_softmax,
    mul,
    no_grad,
    scale,
    softmax,
    sum_axis,
    weighted_mean,
)
from app.services.mimo_model import MimoSegNet
from app.services.transforms import apply_cutmix
from app.services.uncertainty import WeightMask

IGNORE_INDEX = 255

Normalization = Literal["weighted", "literal"]


class PseudoLabel(BaseModel):
    """Hard targets from a no-gradient prediction, with the source distribution"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: np.ndarray
    probs: np.ndarray


def _one_hot(targets: np.ndarray, num_classes: int, dtype: np.dtype) -> Tuple[np.ndarray, np.ndarray]:
    """(N,C,H,W) one-hot of the targets plus the (N,H,W) valid-pixel mask"""
    valid = targets != IGNORE_INDEX
    if (targets[valid] < 0).any() or (targets[valid] >= num_classes).any():
        raise LabError(f"target ids must lie in [0, {num_classes}) or equal {IGNORE_INDEX}")
    safe = np.where(valid, targets, 0)
    onehot = (safe[:, None, :, :] == np.arange(num_classes)[None, :, None, None]) & valid[:, None, :, :]
    return onehot.astype(dtype), valid


def pixel_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """Per-pixel -log softmax(logits)[target]; ignored pixels contribute 0"""
    targets = np.asarray(targets)
    if logits.data.ndim != 4 or targets.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatchError("cross_entropy", logits.shape, targets.shape)
    onehot, valid = _one_hot(targets, logits.shape[1], logits.dtype)
    picked = sum_axis(mul(Tensor(onehot), log_softmax(logits)), axis=1)
    return scale(picked, -1.0), valid


def sup_loss(logits: Tensor, labels: np.ndarray) -> Tuple[Tensor, bool]:
    """Mean cross entropy over non-ignored pixels; (0, True) when all are ignored"""
    ce, valid = pixel_cross_entropy(logits, labels)
    all_ignored = not valid.any()
    if all_ignored:
        logger.warning("Every pixel of the labeled batch is ignored; supervised loss set to 0")
    return weighted_mean(ce, valid.astype(logits.dtype)), all_ignored


def make_pseudo(
    model: MimoSegNet,
    x_ul: np.ndarray,
    t1: CutMixSpec,
    t2: CutMixSpec,
    rng: np.random.Generator,
) -> Tuple[PseudoLabel, PseudoLabel, Tuple[np.ndarray, np.ndarray]]:
    """Teacher pass on the clean batch, crossed and transformed.

    p1 = T1(softmax(F2(x))) teaches branch 1, p2 = T2(softmax(F1(x))) teaches
    branch 2. Also returns both heads' untransformed argmax maps.
    """
    with no_grad():
        logits1, logits2 = model.forward(x_ul, x_ul, rng)
        prob1, prob2 = softmax(logits1).data, softmax(logits2).data
    p1 = apply_cutmix(prob2, t1)
    p2 = apply_cutmix(prob1, t2)
    pseudo1 = PseudoLabel(labels=np.argmax(p1, axis=1), probs=p1)
    pseudo2 = PseudoLabel(labels=np.argmax(p2, axis=1), probs=p2)
    return pseudo1, pseudo2, (np.argmax(prob1, axis=1), np.argmax(prob2, axis=1))


def uscs_loss(
    student_logits: Tensor,
    pseudo: PseudoLabel,
    weights: Optional[WeightMask] = None,
    normalization: Normalization = "weighted",
) -> Tensor:
    """sum W * CE / sum W against hard pseudo labels; W = 1 when not given.

    ``literal`` additionally divides by the pixel count of one image.
    """
    ce, _ = pixel_cross_entropy(student_logits, pseudo.labels)
    if weights is None:
        w = np.ones(ce.shape, dtype=student_logits.dtype)
    else:
        w = np.asarray(weights.values, dtype=student_logits.dtype)
        if w.shape != ce.shape:
            raise ShapeMismatchError("uscs_loss", ce.shape, w.shape)
    loss = weighted_mean(ce, w)
    if normalization == "literal":
        loss = scale(loss, 1.0 / (ce.shape[1] * ce.shape[2]))
    return loss


def scs_loss(student_logits: Tensor, pseudo: PseudoLabel) -> Tensor:
    return uscs_loss(student_logits, pseudo, None)


def total_loss(
    sup1: Tensor,
    sup2: Tensor,
    uscs1: Optional[Tensor],
    uscs2: Optional[Tensor],
    lam: float,
    weights: Tuple[Optional[WeightMask], Optional[WeightMask]] = (None, None),
    all_ignored: bool = False,
) -> Tuple[Tensor, LossReport]:
    """sup1 + sup2 + lam * (uscs1 + uscs2); the unlabeled terms may be absent"""
    total = add(sup1, sup2)
    if uscs1 is not None and uscs2 is not None:
        total = add(total, scale(add(uscs1, uscs2), lam))
    present = [w for w in weights if w is not None]
    report = LossReport(
        sup1=sup1.item(),
        sup2=sup2.item(),
        uscs1=uscs1.item() if uscs1 is not None else 0.0,
        uscs2=uscs2.item() if uscs2 is not None else 0.0,
        total=total.item(),
        lam=lam,
        mean_weight=float(np.mean([w.mean for w in present])) if present else None,
        confident_fraction=float(np.mean([w.confident_fraction for w in present])) if present else None,
        all_ignored=all_ignored,
    )
    return total, report
