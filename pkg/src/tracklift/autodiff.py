"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is a tape: applying an operation to ``Tensor`` objects eagerly
computes the forward value and records a backward closure. Calling
``backward()`` on a scalar root walks the tape in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad`` set. Evaluation is deterministic: reductions use
numpy's fixed index-order accumulation, so identical inputs produce
bitwise-identical outputs.

Training runs in float32 by default; wrap code in ``precision("float64")``
for gradient checking.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError


class GraphError(NumericalError):
    """Graph construction or evaluation failed."""


class ShapeError(GraphError):
    """Operand shapes are inconsistent for the requested operation."""


class NonFiniteError(GraphError):
    """An operation produced NaN or infinity."""


_STATE = {"dtype": np.dtype(np.float32), "check_finite": True}


def default_dtype() -> np.dtype:
    return _STATE["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise GraphError(f"unsupported dtype {dtype}; use float32 or float64")
    old = _STATE["dtype"]
    _STATE["dtype"] = dtype
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-operation NaN/inf scan (on by default)."""
    old = _STATE["check_finite"]
    _STATE["check_finite"] = bool(enabled)
    try:
        yield
    finally:
        _STATE["check_finite"] = old


def _assert_finite(data: np.ndarray, op: str) -> None:
    if not _STATE["check_finite"]:
        return
    finite = np.isfinite(data)
    if not finite.all():
        idx = int(np.argmin(finite.ravel()))
        raise NonFiniteError(f"op '{op}' produced a non-finite value at flat index {idx}")


class Tensor:
    """Immutable dense array node of the computation tape.

    ``data`` must not be mutated after construction; every operation
    allocates a fresh output array.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        # Explicit float arrays and numpy float scalars keep their dtype
        # (numpy returns scalars for 0-d results); anything else (lists,
        # python scalars, integer arrays) takes the session default.
        if isinstance(data, (np.ndarray, np.floating)) and data.dtype in (
                np.dtype(np.float32), np.dtype(np.float64)):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """Raw value array. Treat as read-only."""
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar root."""
        if self.data.shape != ():
            raise GraphError(f"backward requires a scalar root, got shape {self.data.shape}")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the requires_grad subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accum(parent: Tensor, g: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.zeros(parent.data.shape, dtype=parent.data.dtype)
    parent.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _assert_finite(data, op)
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, op=op, parents=tuple(parents),
                  backward=backward if rg else None)


# -- elementwise binary ops -------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {e}") from e

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {e}") from e

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {e}") from e

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: {e}") from e

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), backward, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from e

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(out, (a, b), backward, "matmul")


# -- elementwise unary ops --------------------------------------------


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward, "neg")


def power(a: Tensor, p) -> Tensor:
    p = float(p)
    with np.errstate(invalid="ignore"):
        out = a.data ** p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _node(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _node(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        # Guarded at the origin so norms of zero residuals backpropagate
        # zeros instead of NaN.
        _accum(a, g * 0.5 / np.maximum(out, 1e-12))

    return _node(out, (a,), backward, "sqrt")


def absval(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        # sign(0) = 0: subgradient 0 at the kink.
        _accum(a, g * np.sign(a.data))

    return _node(out, (a,), backward, "abs")


def minimum(a: Tensor, c) -> Tensor:
    """Elementwise min with a constant; gradient is 0 at and above the kink."""
    c = np.asarray(c, dtype=a.dtype)
    out = np.minimum(a.data, c)

    def backward(g):
        _accum(a, g * (a.data < c))

    return _node(out, (a,), backward, "minimum")


def clamp_magnitude(a: Tensor, min_mag: float) -> Tensor:
    """Push values away from zero: |out| >= min_mag, sign preserved.

    Entries that get clamped receive zero gradient; sign(0) counts as
    positive. Used to keep perspective division finite.
    """
    min_mag = float(min_mag)
    sign = np.where(a.data < 0, -1.0, 1.0).astype(a.dtype)
    clamped = np.abs(a.data) < min_mag
    out = np.where(clamped, sign * min_mag, a.data)

    def backward(g):
        _accum(a, g * (~clamped))

    return _node(out, (a,), backward, "clamp_magnitude")


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity that blocks all gradient flow upstream."""
    return Tensor(a.data, requires_grad=False, op="stop_gradient")


# -- reductions --------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            expand = list(out.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def backward(g):
        if not keepdims:
            expand = list(out.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _node(out, (a,), backward, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner))

    return _node(out, (a,), backward, "softmax")


# -- shape ops ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from e

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _node(out, (a,), backward, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        ga = np.zeros(a.data.shape, dtype=a.data.dtype)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _node(np.asarray(out), (a,), backward, "slice")


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    axis = axis % parts[0].ndim
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(slicer)])

    return _node(out, tuple(parts), backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: {e}") from e

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _node(np.ascontiguousarray(out), (a,), backward, "broadcast")


def stack(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    expanded = []
    for p in parts:
        shape = list(p.shape)
        shape.insert(axis % (p.ndim + 1), 1)
        expanded.append(reshape(p, tuple(shape)))
    return concat(expanded, axis=axis)


# -- composed helpers --------------------------------------------------


def relu(a: Tensor) -> Tensor:
    return sub(a, minimum(a, 0.0))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed stably via max(a, 0) + log1p(exp(-|a|))."""
    positive = relu(a)
    return add(positive, log(add(exp(neg(absval(a))), 1.0)))


# -- graph-level API ---------------------------------------------------


def gradients(root: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar root w.r.t. named leaves.

    Leaves unreachable from the root map to zero arrays of their shape.
    """
    root.backward()
    out = {}
    for name, leaf in leaves.items():
        if leaf.grad is None:
            out[name] = np.zeros(leaf.data.shape, dtype=leaf.data.dtype)
        else:
            out[name] = leaf.grad
    return out


def check_gradients(fn, inputs: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a dict of leaf tensors to a scalar Tensor; ``inputs`` must
    be float64 arrays. Returns the worst relative error over all input
    elements, using denominator max(|analytic|, |numeric|, 1e-8). Reports
    rather than throws.
    """
    for name, arr in inputs.items():
        if np.asarray(arr).dtype != np.float64:
            raise GraphError(f"check_gradients requires float64 inputs, '{name}' is not")

    with precision(np.float64):
        leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                  for k, v in inputs.items()}
        root = fn(leaves)
        analytic = gradients(root, leaves)

        def evaluate(bindings):
            ts = {k: Tensor(v) for k, v in bindings.items()}
            return fn(ts).item()

        worst = 0.0
        for name, arr in inputs.items():
            base = np.array(arr, dtype=np.float64)
            flat = base.ravel()
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = evaluate({**inputs, name: base})
                flat[i] = saved - eps
                f_minus = evaluate({**inputs, name: base})
                flat[i] = saved
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(analytic[name].ravel()[i])
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
