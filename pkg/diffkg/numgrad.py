"""Dense-array reverse-mode differentiation on top of numpy.

Every loss in the package is composed from the primitives in this module.
A :class:`Tensor` wraps a numpy array.  When any input of an operation
requires gradients (and recording is enabled, see :func:`no_grad`) the
output keeps references to its inputs plus a closure computing the local
vector-Jacobian product.  :func:`backward` walks that graph in reverse
topological order, so each recorded node is visited exactly once.

Precision is process-wide: 32-bit by default, 64-bit for tests that compare
against finite differences (see :func:`default_dtype`).

Public surface
--------------
- :class:`Tensor`, :func:`tensor`, :func:`parameter`
- primitives: ``add``, ``mul``, ``div``, ``matmul``, ``spmm``, ``concat``,
  ``gather_rows``, ``segment_sum``, ``leaky_relu``, ``sigmoid``,
  ``log_sigmoid``, ``exp``, ``log``, ``softmax``, ``logsumexp``,
  ``dropout``, ``l2_norm``, ``l2_normalize``, ``clamp_min``, ``sum``,
  ``mean``, ``reshape``, ``transpose``
- composites: ``squared_error``, ``row_normalize``, ``segment_softmax``
- :func:`backward`, :func:`finite_diff_check`
- :class:`AdamState`, :func:`adam_step`, :class:`Adam`
"""

from __future__ import annotations

import contextlib
import logging
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

logger = logging.getLogger(__name__)

# Floor applied to log inputs, division denominators and norms.
EPS = 1e-10


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# Precision and recording mode
# ---------------------------------------------------------------------------

_dtype: type[np.floating] = np.float32

# Recording is per thread so read-only forward passes can run concurrently.
_local = threading.local()


def get_default_dtype() -> type[np.floating]:
    return _dtype


def set_default_dtype(dtype: Any) -> None:
    """Set the float type used for every new tensor (``float32`` or ``float64``)."""
    global _dtype
    resolved = np.dtype(dtype).type
    if resolved not in (np.float32, np.float64):
        raise ValueError(f"dtype must be float32 or float64, got {np.dtype(dtype).name}")
    _dtype = resolved


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily switch the default float type."""
    previous = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording operations."""
    previous = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    # Make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator.
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str = "",
        dtype: Any = None,
    ) -> None:
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype or _dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other: Any) -> Tensor:
        return add(other, neg(self))

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> Tensor:
        return matmul(other, self)

    # ------------------------------------------------------------------
    # Method forms of common primitives
    # ------------------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def tensor(data: Any, requires_grad: bool = False, name: str = "") -> Tensor:
    """Create a tensor in the current default precision."""
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data: Any, name: str = "") -> Tensor:
    """Create a leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    op: str,
    backward_fn: BackwardFn,
) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum *grad* down to *shape*, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")

    def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), "add", _grad)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")

    def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), "mul", _grad)


def _guard(denominator: np.ndarray) -> np.ndarray:
    """Push values closer to zero than EPS out to +/-EPS."""
    sign = np.where(denominator < 0, -1.0, 1.0).astype(denominator.dtype)
    return np.where(np.abs(denominator) < EPS, sign * EPS, denominator)


def div(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    denom = _guard(b.data)
    out = a.data / denom

    def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g / denom, a.shape), _unbroadcast(-g * out / denom, b.shape)

    return _record(out, (a, b), "div", _grad)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * exponent * a.data ** (exponent - 1),)

    return _record(out, (a,), "pow", _grad)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, EPS)

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.where(a.data > EPS, g / clamped, 0.0).astype(g.dtype),)

    return _record(np.log(clamped), (a,), "log", _grad)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.data, floor)
    return _record(out, (a,), "clamp_min", lambda g: (g * (a.data > floor),))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.where(positive, g, slope * g),)

    return _record(out, (a,), "leaky_relu", _grad)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data).astype(a.dtype, copy=False)
    return _record(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(a))`` evaluated without overflow."""
    out = -np.logaddexp(0.0, -a.data)

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * expit(-a.data),)

    return _record(out, (a,), "log_sigmoid", _grad)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), "softmax", _grad)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    peak = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - peak)
    total = e.sum(axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = e / total

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _record(out if keepdims else np.squeeze(out, axis=axis), (a,), "logsumexp", _grad)


def dropout(
    a: Tensor,
    rate: float,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    rng = rng if rng is not None else np.random.default_rng()
    scale = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _record(a.data * scale, (a,), "dropout", lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# Linear algebra and indexing
# ---------------------------------------------------------------------------


def matmul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), "matmul", _grad)


def spmm(matrix: sp.spmatrix | sp.sparray, x: Tensor) -> Tensor:
    """Multiply a constant sparse matrix by a dense tensor."""
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {x.shape}")
    out = np.asarray(matrix @ x.data).astype(x.dtype, copy=False)

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.asarray(matrix.T @ g).astype(g.dtype, copy=False),)

    return _record(out, (x,), "spmm", _grad)


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {original} into {tuple(shape)}") from None
    return _record(out, (a,), "reshape", lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _grad(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return _record(out, parts, "concat", _grad)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), "gather_rows", _grad)


def segment_sum(a: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of *a* into ``n_segments`` buckets given by *segment_ids*."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape[0] != a.shape[0]:
        raise ShapeError(
            f"segment_sum: {segment_ids.shape[0]} segment ids for shape {a.shape}"
        )
    out = np.zeros((n_segments, *a.shape[1:]), dtype=a.dtype)
    np.add.at(out, segment_ids, a.data)
    return _record(out, (a,), "segment_sum", lambda g: (g[segment_ids],))


# ---------------------------------------------------------------------------
# Reductions and norms
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", _grad)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, EPS)

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * a.data / safe,)

    return _record(norm if keepdims else np.squeeze(norm, axis=axis), (a,), "l2_norm", _grad)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    """Scale slices along *axis* to unit L2 norm; norms below *eps* are floored."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = a.data / safe
    floored = norm < eps

    def _grad(g: np.ndarray) -> tuple[np.ndarray]:
        projected = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(floored, g / safe, projected),)

    return _record(out, (a,), "l2_normalize", _grad)


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------


def squared_error(a: Any, b: Any, axis: int | None = None) -> Tensor:
    diff = _as_tensor(a) - _as_tensor(b)
    return sum(diff * diff, axis=axis)


def row_normalize(a: Tensor, floor: float = 1e-8) -> Tensor:
    """Divide each row by its sum, with the sum floored at *floor*."""
    return a / clamp_min(sum(a, axis=1, keepdims=True), floor)


def segment_softmax(logits: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a 1-D tensor within each segment."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    peak = np.full(n_segments, -np.inf, dtype=logits.dtype)
    np.maximum.at(peak, segment_ids, logits.data)
    # Softmax is shift invariant, so the per-segment max is a constant.
    e = exp(logits - peak[segment_ids])
    totals = segment_sum(e, segment_ids, n_segments)
    return e / gather_rows(totals, segment_ids)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in *params* that the loss does not reach receive a zero
    gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Return the worst relative error between analytic and central-difference gradients.

    *f* must be deterministic (dropout disabled).  The relative error of one
    coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    for p in params:
        p.zero_grad()
    backward(f(), params)
    analytic = [p.grad.copy() for p in params]  # type: ignore[union-attr]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + eps
                upper = float(f().data)
                flat[k] = original - eps
                lower = float(f().data)
                flat[k] = original
                numeric = (upper - lower) / (2.0 * eps)
                exact = float(grad.reshape(-1)[k])
                worst = max(worst, abs(exact - numeric) / (abs(exact) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def initialise(self, params: Sequence[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Raises:
        NumericalError: if any gradient holds NaN or infinity; no parameter
            is touched in that case.
    """
    if not state.m:
        state.initialise(params)
    if len(state.m) != len(params):
        raise ShapeError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    resolved = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, resolved):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {p.name or '<unnamed>'!r}")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, resolved, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    """Adam over a fixed parameter group, reading gradients from ``.grad``."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.initialise(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
