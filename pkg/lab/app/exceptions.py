from typing import Any, Dict, List, Optional, Sequence


class LabError(Exception):
    """Base error for the segmentation lab"""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ShapeMismatchError(LabError):
    """A primitive received operands whose shapes do not agree"""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class NonScalarLossError(LabError):
    def __init__(self, shape: Sequence[int]):
        super().__init__(f"backward needs a scalar loss, got shape {tuple(shape)}")


class ConfigValidationError(LabError):
    """Config rejected; lists every offending key"""

    def __init__(self, problems: Dict[str, str]):
        self.problems = dict(problems)
        self.keys: List[str] = sorted(self.problems)
        lines = [f"{key}: {msg}" for key, msg in sorted(self.problems.items())]
        super().__init__("invalid config keys: " + "; ".join(lines))


class GeometryMismatchError(LabError):
    pass


class SplitError(LabError):
    pass


class NonFiniteLossError(LabError):
    """Training loss became NaN/inf; the config is echoed for reproduction"""

    def __init__(self, iteration: int, config: Optional[Dict[str, Any]] = None):
        self.iteration = iteration
        self.config = config or {}
        echoed = ", ".join(f"{k}={v}" for k, v in sorted(self.config.items()))
        super().__init__(f"non-finite loss at iteration {iteration} (config: {echoed})")
