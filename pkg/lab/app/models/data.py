from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class SceneSpec(BaseModel):
    canvas_size: int = Field(64, ge=4)
    num_classes: int = Field(4, ge=2)
    channels: int = Field(3, ge=1)
    shapes_min: int = Field(1, ge=0)
    shapes_max: int = Field(4, ge=0)
    radius_min: int = Field(6, ge=1)
    radius_max: int = Field(16, ge=1)
    noise: float = Field(0.12, ge=0.0)
    color_jitter: float = Field(0.08, ge=0.0)
    # per-class mean colours; generated from the palette when omitted
    class_colors: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def ranges_ordered(self) -> "SceneSpec":
        if self.shapes_max < self.shapes_min:
            raise ValueError("shapes_max must be >= shapes_min")
        if self.radius_max < self.radius_min:
            raise ValueError("radius_max must be >= radius_min")
        if self.class_colors is not None:
            if len(self.class_colors) != self.num_classes:
                raise ValueError("class_colors needs one colour per class")
            if any(len(c) != self.channels for c in self.class_colors):
                raise ValueError("every class colour needs one value per channel")
        return self


class AugmentConfig(BaseModel):
    crop_size: int = Field(64, ge=1)
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    scale_range: Tuple[float, float] = (0.5, 2.0)

    @field_validator("scale_range")
    @classmethod
    def ordered(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if v[0] <= 0 or v[1] < v[0]:
            raise ValueError("scale range must be positive and ordered")
        return v


class CutBox(BaseModel):
    top: int = Field(..., ge=0)
    left: int = Field(..., ge=0)
    height: int = Field(..., ge=0)
    width: int = Field(..., ge=0)

    @property
    def area(self) -> int:
        return self.height * self.width


class CutMixSpec(BaseModel):
    """Per batch element: the partner it borrows from and the pasted box"""

    image_shape: Tuple[int, int]
    partner: List[int]
    boxes: List[CutBox]

    @model_validator(mode="after")
    def consistent(self) -> "CutMixSpec":
        h, w = self.image_shape
        n = len(self.partner)
        if len(self.boxes) != n:
            raise ValueError("one box per batch element is required")
        if sorted(self.partner) != list(range(n)):
            raise ValueError("partner must be a permutation of the batch")
        if n > 1 and any(p == i for i, p in enumerate(self.partner)):
            raise ValueError("partner may only map an element to itself for a batch of one")
        for box in self.boxes:
            if box.top + box.height > h or box.left + box.width > w:
                raise ValueError(f"box {box} leaves the {h}x{w} image")
        return self

    @property
    def batch_size(self) -> int:
        return len(self.partner)

    @classmethod
    def identity(cls, batch_size: int, image_shape: Tuple[int, int]) -> "CutMixSpec":
        partner = [(i + 1) % batch_size for i in range(batch_size)]
        boxes = [CutBox(top=0, left=0, height=0, width=0) for _ in range(batch_size)]
        return cls(image_shape=image_shape, partner=partner, boxes=boxes)
