"""Reverse-mode differentiation over the small set of numpy primitives the
segmentation network needs.

Every primitive is a ``Function`` with ``forward`` on raw arrays and a
``backward`` returning one gradient per parent (``None`` when a parent gets
nothing). Graphs are recorded while grad mode is on; ``no_grad()`` turns
recording off for teacher passes and inference.
"""
import contextlib
import itertools
import threading
from typing import Callable, Dict, FrozenSet, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.exceptions import LabError, NonScalarLossError, ShapeMismatchError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_grad_state = threading.local()
_tensor_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Record no graph inside the block"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        if array.ndim > 0 and min(array.shape) == 0:
            raise LabError(f"tensor extents must be positive, got {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.id = next(_tensor_ids)
        self._fn: Optional["Function"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLossError(self.shape)
        return float(self.data.reshape(-1)[0])

    def backward(self) -> Dict[str, np.ndarray]:
        return backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.dtype}{label} grad={self.requires_grad}>"


class Function:
    """One recorded primitive application"""

    kind = "op"
    blocks_gradient = False

    def __init__(self, parents: Tuple[Tensor, ...], **options):
        self.parents = parents
        for key, value in options.items():
            setattr(self, key, value)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: Tensor, **options) -> Tensor:
        fn = cls(parents, **options)
        out = fn.forward(*[p.data for p in parents])
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        result = Tensor(out, requires_grad=track and not cls.blocks_gradient)
        if track:
            result._fn = fn
        return result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    kind = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    kind = "scale"

    def forward(self, x):
        return x * x.dtype.type(self.factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class Log(Function):
    kind = "log"

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Relu(Function):
    kind = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.mask, grad, grad.dtype.type(0)),)


class Softmax(Function):
    kind = "softmax"

    def forward(self, x):
        shifted = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    kind = "log_softmax"

    def forward(self, x):
        shifted = x - x.max(axis=self.axis, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=self.axis, keepdims=True))
        out = shifted - log_norm
        self.prob = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.prob * grad.sum(axis=self.axis, keepdims=True),)


class SumAxis(Function):
    kind = "sum"

    def forward(self, x):
        self.shape = x.shape
        return x.sum(axis=self.axis)

    def backward(self, grad):
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.shape).copy(),)


class Mean(Function):
    kind = "mean"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad):
        n = int(np.prod(self.shape))
        return (np.full(self.shape, grad / n, dtype=grad.dtype),)


class WeightedMean(Function):
    """sum(w * x) / sum(w) over all elements; zero when the weights vanish"""

    kind = "weighted_mean"

    def forward(self, x):
        w = self.weights.astype(x.dtype, copy=False)
        self.w = w
        self.total = w.sum()
        if self.total == 0:
            return np.zeros((), dtype=x.dtype)
        return np.asarray((w * x).sum() / self.total, dtype=x.dtype)

    def backward(self, grad):
        if self.total == 0:
            return (np.zeros_like(self.w),)
        return (grad * self.w / self.total,)


class Where(Function):
    kind = "where"

    def forward(self, a, b):
        return np.where(self.mask, a, b)

    def backward(self, grad):
        zero = grad.dtype.type(0)
        return np.where(self.mask, grad, zero), np.where(self.mask, zero, grad)


class Concat(Function):
    kind = "concat"

    def forward(self, *arrays):
        self.sizes = [a.shape[0] for a in arrays]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=0))


class BatchSlice(Function):
    kind = "slice"

    def forward(self, x):
        self.shape = x.shape
        return x[self.start:self.stop].copy()

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        full[self.start:self.stop] = grad
        return (full,)


class StopGradient(Function):
    kind = "stop_gradient"
    blocks_gradient = True

    def forward(self, x):
        return x.copy()

    def backward(self, grad):
        return (None,)


class Conv2d(Function):
    """Direct 2-D cross-correlation, NCHW input, OIHW kernel"""

    kind = "conv2d"

    def forward(self, x, w, b=None):
        p, s = self.padding, self.stride
        kh, kw = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        self.padded_shape = xp.shape
        self.input_shape = x.shape
        self.windows = windows
        self.w = w
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        p, s = self.padding, self.stride
        w = self.w
        _, _, kh, kw = w.shape
        ho, wo = grad.shape[2], grad.shape[3]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
        h, wd = self.input_shape[2], self.input_shape[3]
        grad_x = grad_xp[:, :, p:p + h, p:p + wd] if p else grad_xp
        grads = [grad_x, grad_w]
        if len(self.parents) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def _bilinear_matrix(n: int, dtype: np.dtype) -> np.ndarray:
    """(2n, n) interpolation weights with half-pixel centres"""
    matrix = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        matrix[o, i0] += 1.0 - t
        matrix[o, i1] += t
    return matrix


class Upsample2x(Function):
    kind = "upsample2x"

    def forward(self, x):
        self.shape = x.shape
        if self.mode == "nearest":
            return x.repeat(2, axis=2).repeat(2, axis=3)
        self.ah = _bilinear_matrix(x.shape[2], x.dtype)
        self.aw = _bilinear_matrix(x.shape[3], x.dtype)
        return np.einsum("oh,nchw,pw->ncop", self.ah, x, self.aw)

    def backward(self, grad):
        n, c, h, w = self.shape
        if self.mode == "nearest":
            return (grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
        return (np.einsum("oh,ncop,pw->nchw", self.ah, grad, self.aw),)


# --- public primitive wrappers -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def sum_axis(x: Tensor, axis: int = 1) -> Tensor:
    return SumAxis.apply(x, axis=axis)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


def weighted_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    """Masked weighted mean; ``weights`` are constants of x's shape"""
    weights = np.asarray(weights)
    if weights.shape != x.shape:
        raise ShapeMismatchError("weighted_mean", x.shape, weights.shape)
    return WeightedMean.apply(x, weights=weights)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    _same_shape("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    try:
        broadcast = np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        broadcast = None
    if broadcast != a.shape:
        raise ShapeMismatchError("where", mask.shape, a.shape)
    return Where.apply(a, b, mask=mask)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise ShapeMismatchError("concat", *[x.shape for x in tensors])
    return Concat.apply(*tensors)


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise LabError(f"slice [{start}:{stop}] out of range for batch of {x.shape[0]}")
    return BatchSlice.apply(x, start=start, stop=stop)


def stop_gradient(x: Tensor) -> Tensor:
    return StopGradient.apply(x)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatchError("conv2d", w.shape, b.shape)
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    parents = (x, w) if b is None else (x, w, b)
    return Conv2d.apply(*parents, stride=int(stride), padding=int(padding))


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    if mode not in ("nearest", "bilinear"):
        raise LabError(f"unknown upsampling mode '{mode}'")
    if x.data.ndim != 4:
        raise ShapeMismatchError("upsample2x", x.shape)
    return Upsample2x.apply(x, mode=mode)


def argmax(x: Union[Tensor, np.ndarray], axis: int = 1) -> np.ndarray:
    """Hard argmax over channels; ties go to the lowest index. Not differentiable."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


def op_set() -> FrozenSet[str]:
    kinds = {cls.kind for cls in Function.__subclasses__()}
    kinds.add("argmax")
    return frozenset(kinds)


# --- graph and backward --------------------------------------------------------

class GraphNode(NamedTuple):
    node_id: int
    kind: str
    input_ids: Tuple[int, ...]
    output: Tensor


class ComputeGraph:
    """Topologically ordered record of everything the loss depends on"""

    def __init__(self, nodes: List[GraphNode], leaves: List[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if tensor.id in seen:
                continue
            seen.add(tensor.id)
            stack.append((tensor, True))
            fn = tensor._fn
            if fn is not None and not fn.blocks_gradient:
                for parent in fn.parents:
                    if parent.id not in seen:
                        stack.append((parent, False))
        nodes = [
            GraphNode(t.id, t._fn.kind, tuple(p.id for p in t._fn.parents), t)
            for t in order if t._fn is not None
        ]
        leaves = [t for t in order if t._fn is None and t.requires_grad]
        return cls(nodes, leaves)

    def __len__(self) -> int:
        return len(self.nodes)

    def kinds(self) -> List[str]:
        return [node.kind for node in self.nodes]


def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """Fill ``.grad`` on every leaf the loss depends on and return them by name"""
    if loss.size != 1:
        raise NonScalarLossError(loss.shape)
    graph = ComputeGraph.from_loss(loss)
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(node.node_id, None)
        fn = node.output._fn
        if grad is None or fn.blocks_gradient:
            continue
        for parent, parent_grad in zip(fn.parents, fn.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + parent_grad
            else:
                grads[parent.id] = parent_grad
    result: Dict[str, np.ndarray] = {}
    for leaf in graph.leaves:
        leaf.grad = grads.get(leaf.id, np.zeros_like(leaf.data))
        result[leaf.name or f"tensor{leaf.id}"] = leaf.grad
    return result


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-12,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the loss from the current parameter values and be
    deterministic; every entry of every parameter is probed.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise LabError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for p in params:
        if p.dtype != np.float64:
            raise LabError(f"finite differences need 64-bit parameters, '{p.name}' is {p.dtype}")

    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            flat_grad = grad.reshape(-1)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + eps
                plus = loss_fn().item()
                flat[k] = original - eps
                minus = loss_fn().item()
                flat[k] = original
                numeric = (plus - minus) / (2.0 * eps)
                a = float(flat_grad[k])
                denom = max(abs(a), abs(numeric), floor)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
