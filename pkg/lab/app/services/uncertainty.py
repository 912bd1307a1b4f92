"""Entropy-based confidence of pseudo labels and the thresholded weight mask."""
import math
import os
from typing import Dict

import numpy as np
from loguru import logger
from PIL import Image
from pydantic import BaseModel, ConfigDict

from app.exceptions import LabError

PROB_FLOOR = 1e-12


class ConfidenceMap(BaseModel):
    """1 - U / ln C per pixel; 1 is fully confident"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray


class WeightMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    gamma: float

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def confident_fraction(self) -> float:
        return float((self.values >= 1.0).mean())


def shannon_entropy(prob: np.ndarray, axis: int = 1) -> np.ndarray:
    """-sum p log p over the class axis, natural log, 0 log 0 = 0"""
    prob = np.asarray(prob)
    if (prob < 0).any():
        raise LabError("class distribution has negative entries")
    sums = prob.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-6):
        worst = float(np.abs(sums - 1.0).max())
        raise LabError(f"class distribution is not normalised (max deviation {worst:.3g})")
    return -(prob * np.log(np.maximum(prob, PROB_FLOOR))).sum(axis=axis)


def confidence(entropy: np.ndarray, num_classes: int) -> ConfidenceMap:
    if num_classes < 2:
        raise LabError("confidence needs at least two classes")
    entropy = np.asarray(entropy)
    if (entropy < 0).any():
        raise LabError("entropy must be non-negative")
    values = np.clip(1.0 - entropy / math.log(num_classes), 0.0, 1.0)
    return ConfidenceMap(values=values)


def weight_mask(conf: ConfidenceMap, gamma: float) -> WeightMask:
    """W = 1 where confidence >= gamma, confidence / gamma below it"""
    if not gamma > 0:
        raise LabError(f"gamma must be > 0, got {gamma}")
    c = conf.values
    values = np.where(c >= gamma, 1.0, c / gamma).astype(c.dtype, copy=False)
    return WeightMask(values=values, gamma=gamma)


def weights_from_probs(prob: np.ndarray, gamma: float) -> WeightMask:
    num_classes = prob.shape[1]
    return weight_mask(confidence(shannon_entropy(prob), num_classes), gamma)


def _to_graymap(field: np.ndarray, scale: float) -> Image.Image:
    pixels = np.clip(np.asarray(field, dtype=np.float64) / scale, 0.0, 1.0)
    return Image.fromarray(np.round(pixels * 255).astype(np.uint8), mode="L")


def export_uncertainty_maps(prob: np.ndarray, gamma: float, directory: str, prefix: str = "sample") -> Dict[str, str]:
    """Write U, confidence and W of every batch element as PGM graymaps.

    U is scaled by ln C, so bright means uncertain.
    """
    os.makedirs(directory, exist_ok=True)
    num_classes = prob.shape[1]
    entropy = shannon_entropy(prob)
    conf = confidence(entropy, num_classes)
    weights = weight_mask(conf, gamma)
    written: Dict[str, str] = {}
    for i in range(prob.shape[0]):
        for tag, field, scale in (
            ("entropy", entropy[i], math.log(num_classes)),
            ("confidence", conf.values[i], 1.0),
            ("weight", weights.values[i], 1.0),
        ):
            path = os.path.join(directory, f"{prefix}_{i:03d}_{tag}.pgm")
            _to_graymap(field, scale).save(path)
            written[f"{i}/{tag}"] = path
    logger.info(f"Exported {len(written)} uncertainty maps to {directory}")
    return written
