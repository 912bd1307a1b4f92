import io
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.exceptions import ConfigValidationError


class FusionMethod(str, Enum):
    GRIDMIX = "gridmix"
    SUMMING = "summing"


class UpsampleMode(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


class Precision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"


class RunMode(str, Enum):
    SUPERVISED = "supervised"
    SCS = "scs"
    USCS = "uscs"


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        return [int(v) for v in value.split(",") if v.strip()]
    return value


def _total_stride(strides: List[int]) -> int:
    return int(math.prod(strides)) if strides else 1


def _check_strides(strides: List[int]) -> List[int]:
    if any(s not in (1, 2) for s in strides):
        raise ValueError("each encoder stride must be 1 or 2")
    return strides


def _geometry_problems(
    encoder_widths: List[int],
    encoder_strides: List[int],
    decoder_widths: List[int],
    sizes: Mapping[str, int],
) -> Dict[str, str]:
    """Cross-field architecture checks, keyed by the field to blame"""
    problems: Dict[str, str] = {}
    if len(encoder_widths) != len(encoder_strides):
        problems["encoder_strides"] = (
            f"needs one stride per encoder width ({len(encoder_strides)} strides, {len(encoder_widths)} widths)"
        )
        return problems
    stride = _total_stride(encoder_strides)
    stages = int(math.log2(stride))
    if len(decoder_widths) < stages:
        problems["decoder_widths"] = f"the encoder stride needs at least {stages} decoder stages"
    for key, size in sizes.items():
        if size % stride:
            problems[key] = f"{size} is not divisible by the encoder stride {stride}"
    return problems


class MimoConfig(BaseModel):
    in_channels: int = Field(3, ge=1)
    num_classes: int = Field(4, ge=2)
    encoder_widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    encoder_strides: List[int] = Field(default_factory=lambda: [2, 2, 1])
    decoder_widths: List[int] = Field(default_factory=lambda: [32, 16])
    grid_size: int = Field(1, ge=1)
    fusion: FusionMethod = FusionMethod.GRIDMIX
    upsample: UpsampleMode = UpsampleMode.NEAREST
    input_size: Tuple[int, int] = (64, 64)

    @field_validator("encoder_strides")
    @classmethod
    def strides_are_one_or_two(cls, v: List[int]) -> List[int]:
        return _check_strides(v)

    @model_validator(mode="after")
    def consistent_geometry(self) -> "MimoConfig":
        h, w = self.input_size
        problems = _geometry_problems(
            self.encoder_widths,
            self.encoder_strides,
            self.decoder_widths,
            {"input_size.height": h, "input_size.width": w},
        )
        if problems:
            raise ValueError("; ".join(f"{k}: {v}" for k, v in sorted(problems.items())))
        return self

    @property
    def total_stride(self) -> int:
        return _total_stride(self.encoder_strides)

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.total_stride))


class TrainConfig(BaseModel):
    """Every knob of a run; read from and written to flat key=value files"""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    # objective
    lam: float = Field(1.0, ge=0.0)
    gamma: float = Field(0.5, gt=0.0, le=1.0)
    use_uncertainty: bool = True
    uscs_normalization: Literal["weighted", "literal"] = "weighted"
    rho: float = Field(0.4, ge=0.0, le=1.0)

    # architecture
    in_channels: int = Field(3, ge=1)
    num_classes: int = Field(4, ge=2)
    encoder_widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    encoder_strides: List[int] = Field(default_factory=lambda: [2, 2, 1])
    decoder_widths: List[int] = Field(default_factory=lambda: [32, 16])
    grid_size: int = Field(1, ge=1)
    fusion: FusionMethod = FusionMethod.GRIDMIX
    upsample: UpsampleMode = UpsampleMode.NEAREST
    precision: Precision = Precision.FLOAT32

    # optimisation
    base_lr: float = Field(0.01, gt=0.0)
    head_lr_mult: float = Field(10.0, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    max_iters: int = Field(3000, ge=1)
    batch_size: int = Field(8, ge=1)

    # data
    num_train: int = Field(2048, ge=2)
    num_val: int = Field(256, ge=1)
    labeled_ratio: float = Field(0.125, gt=0.0, lt=1.0)
    canvas_size: int = Field(64, ge=4)
    shapes_min: int = Field(1, ge=0)
    shapes_max: int = Field(4, ge=0)
    noise: float = Field(0.12, ge=0.0)
    color_jitter: float = Field(0.08, ge=0.0)
    augment: bool = True
    crop_size: int = Field(64, ge=4)
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    scale_min: float = Field(0.5, gt=0.0)
    scale_max: float = Field(2.0, gt=0.0)
    cutmix_min_ratio: float = Field(0.25, ge=0.0, le=1.0)
    cutmix_max_ratio: float = Field(0.5, ge=0.0, le=1.0)

    # seeds
    dataset_seed: int = 0
    split_seed: int = 0
    sampler_seed: int = 0
    init_seed: int = 0

    # bookkeeping
    eval_every: int = Field(500, ge=0)
    eval_batch: int = Field(16, ge=1)
    checkpoint_every: int = Field(1000, ge=0)
    log_every: int = Field(50, ge=1)

    @field_validator("encoder_widths", "encoder_strides", "decoder_widths", mode="before")
    @classmethod
    def split_lists(cls, v: Any) -> Any:
        return _split_ints(v)

    @field_validator("encoder_strides")
    @classmethod
    def strides_are_one_or_two(cls, v: List[int]) -> List[int]:
        return _check_strides(v)

    @model_validator(mode="after")
    def consistent_fields(self) -> "TrainConfig":
        """Checks spanning several keys; runs on defaults as well as given values.

        Raises ConfigValidationError directly so every offending key is named.
        """
        problems = _geometry_problems(
            self.encoder_widths,
            self.encoder_strides,
            self.decoder_widths,
            {"canvas_size": self.canvas_size, "crop_size": self.crop_size},
        )
        if self.crop_size > self.canvas_size:
            problems.setdefault("crop_size", f"crop size {self.crop_size} exceeds canvas {self.canvas_size}")
        if self.shapes_max < self.shapes_min:
            problems["shapes_max"] = f"shapes_max {self.shapes_max} is below shapes_min {self.shapes_min}"
        if self.scale_max < self.scale_min:
            problems["scale_max"] = f"scale_max {self.scale_max} is below scale_min {self.scale_min}"
        if self.cutmix_max_ratio < self.cutmix_min_ratio:
            problems["cutmix_max_ratio"] = (
                f"cutmix_max_ratio {self.cutmix_max_ratio} is below cutmix_min_ratio {self.cutmix_min_ratio}"
            )
        if problems:
            raise ConfigValidationError(problems)
        return self

    @property
    def mode(self) -> RunMode:
        if self.lam == 0:
            return RunMode.SUPERVISED
        return RunMode.USCS if self.use_uncertainty else RunMode.SCS

    @property
    def labeled_count(self) -> int:
        return int(round(self.labeled_ratio * self.num_train))

    def mimo(self) -> MimoConfig:
        return MimoConfig(
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            encoder_widths=self.encoder_widths,
            encoder_strides=self.encoder_strides,
            decoder_widths=self.decoder_widths,
            grid_size=self.grid_size,
            fusion=self.fusion,
            upsample=self.upsample,
            input_size=(self.canvas_size, self.canvas_size),
        )

    # --- flat key=value format ---------------------------------------------

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainConfig":
        problems: Dict[str, str] = {}
        known = set(cls.model_fields)
        for key, value in values.items():
            if key not in known:
                problems[key] = "unknown key"
            elif value is None:
                problems[key] = "missing value"
        clean = {k: v for k, v in values.items() if k in known and v is not None}
        try:
            config = cls(**clean)
        except ValidationError as e:
            for err in e.errors():
                key = ".".join(str(part) for part in err["loc"]) or "config"
                problems.setdefault(key, err["msg"])
            raise ConfigValidationError(problems)
        except ConfigValidationError as e:
            for key, msg in e.problems.items():
                problems.setdefault(key, msg)
            raise ConfigValidationError(problems)
        if problems:
            raise ConfigValidationError(problems)
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigValidationError({"config": f"file not found: {path}"})
        return cls.from_mapping(dotenv_values(path))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(dotenv_values(stream=io.StringIO(text)))

    def to_mapping(self) -> Dict[str, str]:
        flat: Dict[str, str] = {}
        for key in type(self).model_fields:
            value = getattr(self, key)
            if isinstance(value, Enum):
                flat[key] = str(value.value)
            elif isinstance(value, bool):
                flat[key] = "true" if value else "false"
            elif isinstance(value, list):
                flat[key] = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                flat[key] = repr(value)
            else:
                flat[key] = str(value)
        return flat

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_mapping().items())

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        merged = self.to_mapping()
        merged.update({k: v for k, v in overrides.items()})
        return type(self).from_mapping(merged)


class SplitConfig(BaseModel):
    total: int = Field(..., ge=1)
    ratio: float = Field(..., gt=0.0, lt=1.0)
    seed: int = 0


SweepParameter = Literal["gamma", "rho", "fusion", "component", "grid_size", "lam"]


class SweepSpec(BaseModel):
    parameter: SweepParameter
    values: List[str]
    seeds: int = Field(3, ge=1)
    workers: int = Field(1, ge=1)

    @field_validator("values", mode="before")
    @classmethod
    def split_values(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SweepSpec":
        path = Path(path)
        if not path.is_file():
            raise ConfigValidationError({"sweep": f"file not found: {path}"})
        values = dotenv_values(path)
        missing = {k: "missing value" for k, v in values.items() if v is None}
        try:
            spec = cls(**{k: v for k, v in values.items() if v is not None})
        except ValidationError as e:
            raise ConfigValidationError(
                {**missing, **{".".join(str(p) for p in err["loc"]) or "sweep": err["msg"] for err in e.errors()}}
            )
        if missing:
            raise ConfigValidationError(missing)
        return spec
