"""Procedural segmentation scenes with exact ground truth.

Each scene is a stack of filled shapes (disk, rectangle, triangle, ring) on
background. Class colours overlap through per-scene jitter, a low-frequency
texture and per-pixel noise, so colour alone does not solve the task.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.exceptions import SplitError
from app.models.data import AugmentConfig, CutMixSpec, SceneSpec
from app.models.training import SplitConfig, TrainConfig
from app.services.transforms import apply_cutmix, augment_labeled, sample_cutmix

SUPERSAMPLE = 8
TRAIN_STREAM, VAL_STREAM = 0, 1


class ShapeKind(str, Enum):
    DISK = "disk"
    RECTANGLE = "rectangle"
    TRIANGLE = "triangle"
    RING = "ring"


SHAPE_CYCLE = [ShapeKind.DISK, ShapeKind.RECTANGLE, ShapeKind.TRIANGLE, ShapeKind.RING]


class Shape(BaseModel):
    kind: ShapeKind
    class_id: int = Field(..., ge=1)
    cx: float
    cy: float
    radius: float = Field(..., gt=0)
    aspect: float = Field(1.0, gt=0)
    angle: float = 0.0


def shape_kind_for(class_id: int) -> ShapeKind:
    return SHAPE_CYCLE[(class_id - 1) % len(SHAPE_CYCLE)]


def default_class_colors(num_classes: int, channels: int) -> np.ndarray:
    """Mean colours packed around mid-grey so neighbouring classes overlap"""
    k = np.arange(num_classes)[:, None]
    c = np.arange(channels)[None, :]
    return 0.5 + 0.18 * np.cos(2 * math.pi * k / num_classes + 2 * math.pi * c / max(channels, 3))


# --- rasterisation ----------------------------------------------------------------


def _inside(shape: Shape, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dx, dy = x - shape.cx, y - shape.cy
    if shape.kind == ShapeKind.DISK:
        return dx * dx + dy * dy <= shape.radius ** 2
    if shape.kind == ShapeKind.RING:
        d2 = dx * dx + dy * dy
        return (d2 <= shape.radius ** 2) & (d2 >= (0.5 * shape.radius) ** 2)
    if shape.kind == ShapeKind.RECTANGLE:
        cos, sin = math.cos(shape.angle), math.sin(shape.angle)
        u, v = cos * dx + sin * dy, -sin * dx + cos * dy
        return (np.abs(u) <= shape.radius) & (np.abs(v) <= shape.radius * shape.aspect)
    # triangle: vertices on the circumscribed circle
    verts = [
        (shape.cx + shape.radius * math.cos(shape.angle + 2 * math.pi * i / 3),
         shape.cy + shape.radius * math.sin(shape.angle + 2 * math.pi * i / 3))
        for i in range(3)
    ]
    signs = []
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        signs.append((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0))
    return ((signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)) | (
        (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
    )


def _extent(shape: Shape) -> float:
    """Half-width of an axis-aligned box around the shape"""
    if shape.kind == ShapeKind.RECTANGLE:
        return shape.radius * math.sqrt(1.0 + shape.aspect ** 2)
    return shape.radius


def coverage(shape: Shape, canvas_size: int) -> np.ndarray:
    """Fraction of each pixel inside the shape, from SUPERSAMPLE^2 sub-samples"""
    cover = np.zeros((canvas_size, canvas_size))
    e = _extent(shape)
    x0, x1 = max(0, math.floor(shape.cx - e)), min(canvas_size, math.ceil(shape.cx + e) + 1)
    y0, y1 = max(0, math.floor(shape.cy - e)), min(canvas_size, math.ceil(shape.cy + e) + 1)
    if x0 >= x1 or y0 >= y1:
        return cover
    xs = x0 + (np.arange((x1 - x0) * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = y0 + (np.arange((y1 - y0) * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(xs, ys, indexing="xy")
    hits = _inside(shape, x, y).reshape(y1 - y0, SUPERSAMPLE, x1 - x0, SUPERSAMPLE)
    cover[y0:y1, x0:x1] = hits.mean(axis=(1, 3))
    return cover


def rasterize(shapes: Sequence[Shape], canvas_size: int) -> np.ndarray:
    """Label map of the shape stack; later shapes occlude earlier ones.

    Each shape claims the round(sum of coverage) pixels it covers most, so its
    pixel count tracks its true area to within half a pixel plus sampling
    error. Ties go to the lower flat index.
    """
    label = np.zeros((canvas_size, canvas_size), dtype=np.uint8)
    for shape in shapes:
        cover = coverage(shape, canvas_size).ravel()
        count = int(math.floor(cover.sum() + 0.5))
        if count == 0:
            continue
        claimed = np.argsort(-cover, kind="stable")[:count]
        label.ravel()[claimed] = shape.class_id
    return label


def sample_shapes(rng: np.random.Generator, spec: SceneSpec) -> List[Shape]:
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    shapes = []
    for _ in range(count):
        class_id = int(rng.integers(1, spec.num_classes))
        shapes.append(
            Shape(
                kind=shape_kind_for(class_id),
                class_id=class_id,
                cx=float(rng.uniform(0, spec.canvas_size)),
                cy=float(rng.uniform(0, spec.canvas_size)),
                radius=float(rng.uniform(spec.radius_min, spec.radius_max)),
                aspect=float(rng.uniform(0.5, 1.0)),
                angle=float(rng.uniform(0, 2 * math.pi)),
            )
        )
    return shapes


def paint(label: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Image from a label map: jittered class colour, smooth texture, pixel noise"""
    size = spec.canvas_size
    base = np.asarray(spec.class_colors) if spec.class_colors is not None else default_class_colors(
        spec.num_classes, spec.channels
    )
    colors = base + rng.normal(0.0, spec.color_jitter, size=base.shape)
    image = colors[label].transpose(2, 0, 1)

    cells = max(1, size // 8)
    coarse = rng.normal(0.0, 0.5 * spec.noise, size=(cells, cells))
    texture = np.kron(coarse, np.ones((math.ceil(size / cells), math.ceil(size / cells))))[:size, :size]
    image = image + texture[None] + rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_scene(rng: np.random.Generator, spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(image C x H x W in [0, 1], label H x W)"""
    label = rasterize(sample_shapes(rng, spec), spec.canvas_size)
    return paint(label, spec, rng), label


def scene_rng(dataset_seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([dataset_seed, stream, index]))


def generate_scenes(
    spec: SceneSpec, count: int, dataset_seed: int, stream: int, workers: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Scene i is drawn from its own stream, so the result ignores the worker count"""

    def one(index: int) -> Tuple[np.ndarray, np.ndarray]:
        return generate_scene(scene_rng(dataset_seed, stream, index), spec)

    with ThreadPoolExecutor(max_workers=workers or settings.worker_count) as pool:
        scenes = list(pool.map(one, range(count)))
    images = np.stack([s[0] for s in scenes])
    labels = np.stack([s[1] for s in scenes])
    return images, labels


def color_overlap_probe(images: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Error of a per-pixel nearest-class-mean colour classifier.

    A Bayes-error proxy: near zero means colour alone separates the classes.
    """
    pixels = images.transpose(0, 2, 3, 1).reshape(-1, images.shape[1]).astype(np.float64)
    truth = labels.reshape(-1)
    present = [c for c in range(num_classes) if (truth == c).any()]
    means = [pixels[truth == c].mean(axis=0) for c in present]
    dist = np.stack([((pixels - m) ** 2).sum(axis=1) for m in means], axis=1)
    predicted = np.asarray(present)[np.argmin(dist, axis=1)]
    error = float((predicted != truth).mean())
    if error < 0.05:
        logger.warning(f"Colour probe error {error:.3f}: classes are separable by colour alone")
    return error


# --- partitions ---------------------------------------------------------------------


def make_splits(total: int, ratio: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted (labeled, unlabeled) index sets covering range(total)"""
    split = SplitConfig(total=total, ratio=ratio, seed=seed)
    count = int(round(split.ratio * split.total))
    if count == 0:
        raise SplitError(f"ratio {ratio} of {total} scenes leaves no labeled data")
    if count == total:
        raise SplitError(f"ratio {ratio} of {total} scenes leaves no unlabeled data")
    order = np.random.default_rng(split.seed).permutation(split.total)
    return np.sort(order[:count]), np.sort(order[count:])


class LabeledPool(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


class UnlabeledPool(BaseModel):
    """Unlabeled scenes; the ground truth is not carried"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    ids: np.ndarray
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


class SyntheticDataset:
    def __init__(self, cfg: TrainConfig, workers: Optional[int] = None):
        self.spec = SceneSpec(
            canvas_size=cfg.canvas_size,
            num_classes=cfg.num_classes,
            channels=cfg.in_channels,
            shapes_min=cfg.shapes_min,
            shapes_max=cfg.shapes_max,
            noise=cfg.noise,
            color_jitter=cfg.color_jitter,
        )
        self.train_images, self.train_labels = generate_scenes(
            self.spec, cfg.num_train, cfg.dataset_seed, TRAIN_STREAM, workers
        )
        self.val_images, self.val_labels = generate_scenes(
            self.spec, cfg.num_val, cfg.dataset_seed, VAL_STREAM, workers
        )
        self.labeled_ids, self.unlabeled_ids = make_splits(cfg.num_train, cfg.labeled_ratio, cfg.split_seed)
        logger.info(
            f"Synthetic dataset: {cfg.num_train} train ({len(self.labeled_ids)} labeled), "
            f"{cfg.num_val} val, {cfg.canvas_size}x{cfg.canvas_size}, {cfg.num_classes} classes"
        )

    def labeled(self) -> LabeledPool:
        return LabeledPool(
            ids=self.labeled_ids,
            images=self.train_images[self.labeled_ids],
            labels=self.train_labels[self.labeled_ids],
        )

    def unlabeled(self) -> UnlabeledPool:
        return UnlabeledPool(ids=self.unlabeled_ids, images=self.train_images[self.unlabeled_ids])

    def probe(self) -> float:
        return color_overlap_probe(self.val_images, self.val_labels, self.spec.num_classes)


# --- two-group sampler ----------------------------------------------------------------


class EpochStream:
    """Endless index stream over a pool, reshuffled at every epoch boundary"""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self._order = rng.permutation(size)
        self._pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self._pos == self.size:
                self._order = self.rng.permutation(self.size)
                self._pos = 0
            n = min(count, self.size - self._pos)
            out.append(self._order[self._pos:self._pos + n])
            self._pos += n
            count -= n
        return np.concatenate(out)


class Group(BaseModel):
    """One branch's share of a training step"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    labeled_ids: np.ndarray
    x_l: np.ndarray
    y_l: np.ndarray
    x_ul: Optional[np.ndarray] = None
    transform: Optional[CutMixSpec] = None
    x_ul_t: Optional[np.ndarray] = None
    repeated: bool = False


class GroupSampler:
    """Draws (G1, G2) per step.

    Branch 2's labeled batch repeats branch 1's with probability rho and is
    otherwise drawn from an independent order. Both groups share one clean
    unlabeled batch, each with its own CutMix.
    """

    def __init__(
        self,
        labeled: LabeledPool,
        unlabeled: Optional[UnlabeledPool],
        batch_size: int,
        rho: float,
        seed: int,
        augment: Optional[AugmentConfig] = None,
        cutmix_range: Tuple[float, float] = (0.25, 0.5),
    ):
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {rho}")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.batch_size = batch_size
        self.rho = rho
        self.augment = augment
        self.cutmix_range = cutmix_range
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
        self._order1 = EpochStream(len(labeled), streams[0])
        self._order2 = EpochStream(len(labeled), streams[1])
        self._repeat_rng = streams[2]
        self._aug_rng = streams[3]
        self._ul_order = EpochStream(len(unlabeled), streams[4]) if unlabeled is not None else None
        self._cutmix_rng = streams[5]
        self.steps = 0
        self.repeats = 0
        self.unlabeled_reads = 0

    def _labeled_batch(self, picks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        images, labels = self.labeled.images[picks], self.labeled.labels[picks]
        if self.augment is None:
            return images, labels
        pairs = [augment_labeled(img, lab, self.augment, self._aug_rng) for img, lab in zip(images, labels)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def next_groups(self, with_unlabeled: bool = True) -> Tuple[Group, Group]:
        picks1 = self._order1.take(self.batch_size)
        repeated = bool(self._repeat_rng.random() < self.rho)
        x1, y1 = self._labeled_batch(picks1)
        if repeated:
            picks2, x2, y2 = picks1, x1.copy(), y1.copy()
        else:
            picks2 = self._order2.take(self.batch_size)
            x2, y2 = self._labeled_batch(picks2)
        self.steps += 1
        self.repeats += int(repeated)

        g1 = Group(labeled_ids=self.labeled.ids[picks1], x_l=x1, y_l=y1, repeated=repeated)
        g2 = Group(labeled_ids=self.labeled.ids[picks2], x_l=x2, y_l=y2, repeated=repeated)
        if not with_unlabeled:
            return g1, g2
        if self.unlabeled is None:
            raise ValueError("sampler was built without an unlabeled pool")

        x_ul = self.unlabeled.images[self._ul_order.take(self.batch_size)]
        self.unlabeled_reads += 1
        crop_h, crop_w = x1.shape[-2:]
        if x_ul.shape[-2:] != (crop_h, crop_w):
            # labeled crops are smaller than the canvas; centre-crop to match
            top, left = (x_ul.shape[-2] - crop_h) // 2, (x_ul.shape[-1] - crop_w) // 2
            x_ul = np.ascontiguousarray(x_ul[..., top:top + crop_h, left:left + crop_w])
        shape = x_ul.shape[-2:]
        lo, hi = self.cutmix_range
        for group in (g1, g2):
            spec = sample_cutmix(self.batch_size, shape, self._cutmix_rng, lo, hi)
            group.x_ul = x_ul
            group.transform = spec
            group.x_ul_t = apply_cutmix(x_ul, spec)
        return g1, g2

    @property
    def repeat_rate(self) -> float:
        return self.repeats / self.steps if self.steps else 0.0


def build_sampler(cfg: TrainConfig, dataset: SyntheticDataset) -> GroupSampler:
    augment = (
        AugmentConfig(crop_size=cfg.crop_size, flip_prob=cfg.flip_prob, scale_range=(cfg.scale_min, cfg.scale_max))
        if cfg.augment
        else None
    )
    return GroupSampler(
        labeled=dataset.labeled(),
        unlabeled=dataset.unlabeled() if cfg.lam > 0 else None,
        batch_size=cfg.batch_size,
        rho=cfg.rho,
        seed=cfg.sampler_seed,
        augment=augment,
        cutmix_range=(cfg.cutmix_min_ratio, cfg.cutmix_max_ratio),
    )


# --- export -----------------------------------------------------------------------------


def export_scenes(
    images: np.ndarray, labels: np.ndarray, directory: str, num_classes: int, prefix: str = "scene"
) -> Dict[str, str]:
    """PPM image (or PGM for single-channel data) and a PGM label map per scene"""
    os.makedirs(directory, exist_ok=True)
    step = 255 // max(1, num_classes - 1)
    written: Dict[str, str] = {}
    for i, (image, label) in enumerate(zip(images, labels)):
        pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
        if pixels.shape[0] == 3:
            picture, ext = Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB"), "ppm"
        else:
            picture, ext = Image.fromarray(pixels[0], mode="L"), "pgm"
        image_path = os.path.join(directory, f"{prefix}_{i:04d}.{ext}")
        label_path = os.path.join(directory, f"{prefix}_{i:04d}_label.pgm")
        picture.save(image_path)
        Image.fromarray((label.astype(np.uint16) * step).clip(0, 255).astype(np.uint8), mode="L").save(label_path)
        written[f"{i}/image"] = image_path
        written[f"{i}/label"] = label_path
    logger.info(f"Exported {len(images)} scenes to {directory}")
    return written
