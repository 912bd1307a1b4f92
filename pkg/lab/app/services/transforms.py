"""CutMix as a pure pixel-selection transform, plus labeled-data augmentation.

``apply_cutmix`` only copies pixels, so it commutes with any per-pixel map
(softmax, argmax) and serves images, probability maps and label maps alike.
"""
import math
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from app.exceptions import GeometryMismatchError
from app.models.data import AugmentConfig, CutBox, CutMixSpec


def sample_cutmix(
    batch_size: int,
    image_shape: Tuple[int, int],
    rng: np.random.Generator,
    min_ratio: float = 0.25,
    max_ratio: float = 0.5,
) -> CutMixSpec:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    h, w = image_shape
    boxes = []
    for _ in range(batch_size):
        ratio = rng.uniform(min_ratio, max_ratio)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        box_h = min(h, max(0, int(round(math.sqrt(ratio * h * w * aspect)))))
        box_w = min(w, max(0, int(round(math.sqrt(ratio * h * w / aspect)))))
        top = int(rng.integers(0, h - box_h + 1))
        left = int(rng.integers(0, w - box_w + 1))
        boxes.append(CutBox(top=top, left=left, height=box_h, width=box_w))
    partner = [(i + 1) % batch_size for i in range(batch_size)]
    return CutMixSpec(image_shape=(h, w), partner=partner, boxes=boxes)


def apply_cutmix(field: np.ndarray, spec: CutMixSpec) -> np.ndarray:
    """Paste each element's box from its partner; field is (N, ..., H, W)"""
    field = np.asarray(field)
    if field.ndim < 3 or field.shape[0] != spec.batch_size or tuple(field.shape[-2:]) != tuple(spec.image_shape):
        raise GeometryMismatchError(
            f"field of shape {field.shape} does not match a CutMix spec for "
            f"{spec.batch_size} x {tuple(spec.image_shape)}"
        )
    out = field.copy()
    for i, (j, box) in enumerate(zip(spec.partner, spec.boxes)):
        rows = slice(box.top, box.top + box.height)
        cols = slice(box.left, box.left + box.width)
        out[i, ..., rows, cols] = field[j, ..., rows, cols]
    return out


def hflip(image: np.ndarray, label: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1].copy(), label[..., ::-1].copy()


def _resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(c, dtype=np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in image
    ]
    return np.clip(np.stack(channels), 0.0, 1.0).astype(image.dtype)


def _resize_label(label: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    resized = Image.fromarray(label.astype(np.uint8), mode="L").resize((w, h), Image.NEAREST)
    return np.asarray(resized).astype(label.dtype)


def augment_labeled(
    image: np.ndarray,
    label: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    scale: Optional[float] = None,
    flip: Optional[bool] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random scale, crop and horizontal flip applied identically to both.

    ``scale`` and ``flip`` force the draw when given. Labels are only ever
    resampled by nearest neighbour.
    """
    if image.shape[-2:] != label.shape:
        raise GeometryMismatchError(f"image {image.shape} and label {label.shape} are not aligned")
    h, w = label.shape
    factor = rng.uniform(*cfg.scale_range) if scale is None else scale
    new_h, new_w = int(round(h * factor)), int(round(w * factor))
    if min(new_h, new_w) < cfg.crop_size:
        grow = cfg.crop_size / min(new_h, new_w)
        new_h, new_w = max(cfg.crop_size, int(math.ceil(new_h * grow))), max(cfg.crop_size, int(math.ceil(new_w * grow)))
    if (new_h, new_w) != (h, w):
        image = _resize_image(image, (new_h, new_w))
        label = _resize_label(label, (new_h, new_w))

    top = int(rng.integers(0, new_h - cfg.crop_size + 1))
    left = int(rng.integers(0, new_w - cfg.crop_size + 1))
    image = image[:, top:top + cfg.crop_size, left:left + cfg.crop_size]
    label = label[top:top + cfg.crop_size, left:left + cfg.crop_size]

    do_flip = rng.random() < cfg.flip_prob if flip is None else flip
    if do_flip:
        image, label = hflip(image, label)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)
