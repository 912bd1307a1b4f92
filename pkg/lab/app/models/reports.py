from datetime import datetime
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class LossReport(BaseModel):
    sup1: float
    sup2: float
    uscs1: float = 0.0
    uscs2: float = 0.0
    total: float
    lam: float
    mean_weight: Optional[float] = None
    confident_fraction: Optional[float] = None
    all_ignored: bool = False


class StepMetrics(BaseModel):
    iteration: int
    lr: float
    losses: LossReport
    non_overlap: Optional[float] = None
    coincident: bool = False
    step_rejected: bool = False
    wall_ms: float = 0.0

    def csv_row(self) -> Dict[str, object]:
        """Deterministic columns of the per-iteration metrics file"""
        return {
            "iter": self.iteration,
            "lr": self.lr,
            "sup1": self.losses.sup1,
            "sup2": self.losses.sup2,
            "uscs1": self.losses.uscs1,
            "uscs2": self.losses.uscs2,
            "total": self.losses.total,
            "mean_w": self.losses.mean_weight,
            "non_overlap": self.non_overlap,
            "coincident": int(self.coincident),
            "rejected": int(self.step_rejected),
        }


class EvalReport(BaseModel):
    iteration: int = 0
    miou: float
    per_class_iou: List[Optional[float]]
    pixel_accuracy: float
    non_overlap: float
    num_images: int


class ParamCount(BaseModel):
    encoder: int
    decoder: int
    heads: int

    @property
    def total(self) -> int:
        return self.encoder + self.decoder + self.heads


class CostRow(BaseModel):
    pipeline: str
    params: int = Field(..., gt=0)
    macs_per_forward: int = Field(..., gt=0)
    forward_passes: int = Field(..., gt=0)

    @property
    def macs_per_iteration(self) -> int:
        return self.macs_per_forward * self.forward_passes


class CostReport(BaseModel):
    input_shape: List[int]
    rows: List[CostRow]

    def row(self, pipeline: str) -> CostRow:
        for r in self.rows:
            if r.pipeline == pipeline:
                return r
        raise KeyError(pipeline)


class RunManifest(BaseModel):
    run_dir: str
    config: Dict[str, str]
    code_version: str
    seeds: Dict[str, int]
    outputs: Dict[str, str]
    started_at: datetime = Field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
    completed: bool = False
