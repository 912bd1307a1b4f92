"""Two-input two-output segmentation network.

One encoder is shared by both inputs, the two feature maps are fused (grid mix
or summing), a single decoder trunk runs once and two 1x1 classifier heads
emit one prediction per input. ``SingleSegNet`` is the same network with one
input and one head.
"""
import math
from collections import Counter
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from app.exceptions import ShapeMismatchError
from app.models.training import FusionMethod, MimoConfig, Precision
from app.services.autodiff import (
    Tensor,
    add,
    conv2d,
    no_grad,
    relu,
    softmax,
    upsample2x,
    where,
)

InputLike = Union[np.ndarray, Tensor]


def precision_dtype(precision: Union[Precision, str]) -> np.dtype:
    return np.dtype(Precision(precision).value)


class ConvLayer:
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        rng: np.random.Generator,
        dtype: np.dtype,
    ):
        self.name = name
        self.stride = stride
        self.kernel = kernel
        self.padding = kernel // 2
        std = math.sqrt(2.0 / (in_channels * kernel * kernel))
        w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GridMask(BaseModel):
    """Binary field over the fused feature grid, constant on g x g cells"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    grid_size: int

    def broadcast(self) -> np.ndarray:
        return self.values.astype(bool)[None, None, :, :]


def sample_grid_mask(shape: Tuple[int, int], grid_size: int, rng: np.random.Generator) -> GridMask:
    """One Bernoulli(0.5) draw per cell; border cells are truncated"""
    if grid_size < 1:
        raise ValueError("grid size must be >= 1")
    h, w = shape
    cells = rng.random((math.ceil(h / grid_size), math.ceil(w / grid_size))) < 0.5
    values = np.repeat(np.repeat(cells, grid_size, axis=0), grid_size, axis=1)[:h, :w]
    return GridMask(values=values.astype(np.uint8), grid_size=grid_size)


def gridmix(f1: Tensor, f2: Tensor, mask: GridMask) -> Tensor:
    if f1.shape != f2.shape:
        raise ShapeMismatchError("gridmix", f1.shape, f2.shape)
    if mask.values.shape != f1.shape[2:]:
        raise ShapeMismatchError("gridmix", f1.shape, mask.values.shape)
    return where(mask.broadcast(), f1, f2)


def summing_fusion(f1: Tensor, f2: Tensor) -> Tensor:
    if f1.shape != f2.shape:
        raise ShapeMismatchError("summing_fusion", f1.shape, f2.shape)
    return add(f1, f2)


class SegNetBase:
    num_heads = 1

    def __init__(self, config: MimoConfig, seed: int = 0, precision: Union[Precision, str] = Precision.FLOAT32):
        self.config = config
        self.dtype = precision_dtype(precision)
        self.counters: Counter = Counter()
        streams = np.random.SeedSequence(seed).spawn(1 + self.num_heads)
        trunk_rng = np.random.default_rng(streams[0])

        self.encoder: List[ConvLayer] = []
        channels = config.in_channels
        for i, (width, stride) in enumerate(zip(config.encoder_widths, config.encoder_strides)):
            self.encoder.append(ConvLayer(f"encoder.{i}", channels, width, 3, stride, trunk_rng, self.dtype))
            channels = width
        self.feature_channels = channels

        self.decoder: List[ConvLayer] = []
        for i, width in enumerate(config.decoder_widths):
            self.decoder.append(ConvLayer(f"decoder.{i}", channels, width, 3, 1, trunk_rng, self.dtype))
            channels = width

        self.heads: List[ConvLayer] = [
            ConvLayer(f"head{k + 1}", channels, config.num_classes, 1, 1, np.random.default_rng(streams[1 + k]), self.dtype)
            for k in range(self.num_heads)
        ]
        logger.debug(f"Built {type(self).__name__} with {self.param_count()} parameters")

    # --- parameters ------------------------------------------------------------

    def layers(self) -> List[ConvLayer]:
        return self.encoder + self.decoder + self.heads

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def encoder_parameters(self) -> List[Tensor]:
        return [p for layer in self.encoder for p in layer.parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # --- pieces ----------------------------------------------------------------

    def as_input(self, x: InputLike) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def encode(self, x: InputLike) -> Tensor:
        x = self.as_input(x)
        stride = self.config.total_stride
        if x.data.ndim != 4 or x.shape[2] % stride or x.shape[3] % stride:
            raise ShapeMismatchError("encode", x.shape)
        self.counters["encoder"] += 1
        h = x
        for layer in self.encoder:
            h = relu(layer(h))
        return h

    def decode(self, features: Tensor) -> Tensor:
        h = features
        for i, layer in enumerate(self.decoder):
            if i < self.config.upsample_stages:
                h = upsample2x(h, self.config.upsample.value)
            h = relu(layer(h))
        return h

    def head(self, index: int, trunk: Tensor) -> Tensor:
        self.counters["head"] += 1
        return self.heads[index](trunk)


class MimoSegNet(SegNetBase):
    num_heads = 2

    def __init__(self, config: MimoConfig, seed: int = 0, precision: Union[Precision, str] = Precision.FLOAT32):
        super().__init__(config, seed=seed, precision=precision)
        self.last_mask: Optional[GridMask] = None

    def fuse(self, f1: Tensor, f2: Tensor, rng: np.random.Generator) -> Tensor:
        if self.config.fusion == FusionMethod.SUMMING:
            self.last_mask = None
            return summing_fusion(f1, f2)
        self.last_mask = sample_grid_mask(f1.shape[2:], self.config.grid_size, rng)
        return gridmix(f1, f2, self.last_mask)

    def forward(self, x1: InputLike, x2: InputLike, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        x1, x2 = self.as_input(x1), self.as_input(x2)
        if x1.shape != x2.shape:
            raise ShapeMismatchError("forward", x1.shape, x2.shape)
        self.counters["forward"] += 1
        fused = self.fuse(self.encode(x1), self.encode(x2), rng)
        trunk = self.decode(fused)
        return self.head(0, trunk), self.head(1, trunk)

    def forward_inference(self, x: InputLike, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Average of the two heads' class probabilities for x fed to both inputs"""
        with no_grad():
            logits1, logits2 = self.forward(x, x, rng or np.random.default_rng(0))
            p1, p2 = softmax(logits1).data, softmax(logits2).data
        return (p1 + p2) / 2

    def predict_pair(self, x: InputLike, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Each head's argmax map for x fed to both inputs"""
        with no_grad():
            logits1, logits2 = self.forward(x, x, rng or np.random.default_rng(0))
        return np.argmax(logits1.data, axis=1), np.argmax(logits2.data, axis=1)


class SingleSegNet(SegNetBase):
    num_heads = 1

    def forward(self, x: InputLike) -> Tensor:
        self.counters["forward"] += 1
        return self.head(0, self.decode(self.encode(x)))

    def forward_inference(self, x: InputLike) -> np.ndarray:
        with no_grad():
            return softmax(self.forward(x)).data
