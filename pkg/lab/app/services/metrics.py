"""Segmentation quality, head diversity and training-cost accounting."""
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import ShapeMismatchError
from app.models.reports import CostReport, CostRow, ParamCount
from app.services.mimo_model import ConvLayer, MimoSegNet, SegNetBase, SingleSegNet

IGNORE_INDEX = 255

# forward passes per training iteration of each pipeline
PIPELINE_PASSES: Dict[str, int] = {"sup_only": 1, "cps": 4, "uscs": 2}


class ConfusionMatrix:
    """counts[t, p] = pixels with truth t predicted as p"""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ShapeMismatchError("confusion_matrix", counts.shape, (num_classes, num_classes))
        self.counts = counts

    @classmethod
    def from_maps(cls, truth: np.ndarray, pred: np.ndarray, num_classes: int) -> "ConfusionMatrix":
        return cls(num_classes).update(truth, pred)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        truth, pred = np.asarray(truth), np.asarray(pred)
        if truth.shape != pred.shape:
            raise ShapeMismatchError("confusion_matrix", truth.shape, pred.shape)
        keep = truth != IGNORE_INDEX
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        self.counts += np.bincount(t * self.num_classes + p, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatchError("confusion_matrix", self.counts.shape, other.counts.shape)
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> List[Optional[float]]:
        """TP / (TP + FP + FN) per class; None when the class never occurs"""
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        out: List[Optional[float]] = []
        for c in range(self.num_classes):
            denom = tp[c] + fp[c] + fn[c]
            out.append(float(tp[c] / denom) if denom else None)
        return out

    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.counts.sum(axis=1) > 0)

    def miou(self) -> float:
        """Mean IoU over the classes present in the ground truth"""
        present = self.present_classes()
        if present.size == 0:
            return 0.0
        ious = self.iou()
        return float(np.mean([ious[c] for c in present]))

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def class_accuracy(self) -> List[Optional[float]]:
        rows = self.counts.sum(axis=1)
        return [float(self.counts[c, c] / rows[c]) if rows[c] else None for c in range(self.num_classes)]


def non_overlap_ratio(pred1: np.ndarray, pred2: np.ndarray) -> float:
    """Fraction of pixels where two label maps disagree"""
    pred1, pred2 = np.asarray(pred1), np.asarray(pred2)
    if pred1.shape != pred2.shape:
        raise ShapeMismatchError("non_overlap_ratio", pred1.shape, pred2.shape)
    return float(np.mean(pred1 != pred2))


# --- parameters and multiply-accumulates ----------------------------------------------


def count_params(model: SegNetBase) -> ParamCount:
    def total(layers: Sequence[ConvLayer]) -> int:
        return sum(p.size for layer in layers for p in layer.parameters())

    return ParamCount(encoder=total(model.encoder), decoder=total(model.decoder), heads=total(model.heads))


def conv_macs(layer: ConvLayer, height: int, width: int) -> Tuple[int, int, int]:
    """(MACs for one image, output height, output width)"""
    out_h = (height + 2 * layer.padding - layer.kernel) // layer.stride + 1
    out_w = (width + 2 * layer.padding - layer.kernel) // layer.stride + 1
    macs = layer.out_channels * layer.in_channels * layer.kernel * layer.kernel * out_h * out_w
    return macs, out_h, out_w


def macs_breakdown(model: SegNetBase, input_shape: Sequence[int]) -> Dict[str, int]:
    """Per-component MACs of one pass through each component, for one input of ``input_shape``.

    ``input_shape`` is (N, C, H, W) or (C, H, W).
    """
    shape = tuple(input_shape)
    batch, (height, width) = (shape[0] if len(shape) == 4 else 1), shape[-2:]
    parts = {"encoder": 0, "decoder": 0, "head": 0}
    h, w = height, width
    for layer in model.encoder:
        macs, h, w = conv_macs(layer, h, w)
        parts["encoder"] += macs
    for i, layer in enumerate(model.decoder):
        if i < model.config.upsample_stages:
            h, w = 2 * h, 2 * w
        macs, h, w = conv_macs(layer, h, w)
        parts["decoder"] += macs
    parts["head"], _, _ = conv_macs(model.heads[0], h, w)
    return {k: v * batch for k, v in parts.items()}


def count_macs(model: SegNetBase, input_shape: Sequence[int]) -> int:
    """MACs of one forward; a two-input network runs the encoder and a head per input"""
    parts = macs_breakdown(model, input_shape)
    branches = model.num_heads
    return branches * parts["encoder"] + parts["decoder"] + branches * parts["head"]


def cost_report(
    model_pair: Tuple[MimoSegNet, SingleSegNet],
    input_shape: Sequence[int],
    forward_passes: Optional[Dict[str, int]] = None,
) -> CostReport:
    """SupOnly / two-model cross supervision / USCS cost rows"""
    mimo, single = model_pair
    passes = dict(PIPELINE_PASSES)
    passes.update(forward_passes or {})
    single_params = count_params(single).total
    single_macs = count_macs(single, input_shape)
    rows = [
        CostRow(pipeline="sup_only", params=single_params, macs_per_forward=single_macs, forward_passes=passes["sup_only"]),
        CostRow(pipeline="cps", params=2 * single_params, macs_per_forward=single_macs, forward_passes=passes["cps"]),
        CostRow(
            pipeline="uscs",
            params=count_params(mimo).total,
            macs_per_forward=count_macs(mimo, input_shape),
            forward_passes=passes["uscs"],
        ),
    ]
    return CostReport(input_shape=[int(s) for s in input_shape], rows=rows)


def cost_ratios(report: CostReport) -> Dict[str, float]:
    uscs, cps = report.row("uscs"), report.row("cps")
    return {
        "params": uscs.params / cps.params,
        "macs_per_iteration": uscs.macs_per_iteration / cps.macs_per_iteration,
    }
