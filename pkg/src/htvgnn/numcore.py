"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation whose inputs participate in gradient tracking
appends one record to the active :class:`Tape`.  :func:`backward` replays the
tape in reverse execution order, accumulating gradients into the inputs, and
clears it afterwards.
"""
from __future__ import annotations

import contextlib
import math
from collections.abc import Mapping
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.enabled = True

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append((out, parents, backward_fn))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_CHECKS = [True]


@contextlib.contextmanager
def unchecked():
    """Skip per-op finiteness checks (callers must check their final result)."""
    prev = _CHECKS[0]
    _CHECKS[0] = False
    try:
        yield
    finally:
        _CHECKS[0] = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # one reduction covers the common case; NaN/Inf anywhere poisons the sum
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _make(data, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if type(data) is not np.ndarray or data.dtype != DTYPE:
        data = np.asarray(data, dtype=DTYPE)
    if not data.flags.c_contiguous:
        data = np.ascontiguousarray(data)
    if _CHECKS[0]:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data, out.requires_grad, out.grad, out.name = data, False, None, None
    if _TAPE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.record(out, parents, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``owned`` means g is a fresh buffer nobody else holds."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned and g.flags.writeable and g.flags.c_contiguous else np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(ufunc, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(_binary(np.add, a, b, "add"), "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape), True)

    return _make(_binary(np.subtract, a, b, "sub"), "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), True)

    return _make(_binary(np.multiply, a, b, "mul"), "mul", (a, b), bw)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x.data ** p

    def bw(g):
        _accumulate(x, g * p * x.data ** (p - 1.0), True)

    return _make(out, "power", (x,), bw)


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, 2.0 * g * x.data, True)

    return _make(x.data * x.data, "square", (x,), bw)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bw(g):
        _accumulate(x, 0.5 * g / out, True)

    return _make(out, "sqrt", (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * out, True)

    return _make(out, "exp", (x,), bw)


def absolute(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, g * np.sign(x.data), True)

    return _make(np.abs(x.data), "abs", (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accumulate(x, g * out * (1.0 - out), True)

    return _make(out, "sigmoid", (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - out * out), True)

    return _make(out, "tanh", (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        _accumulate(x, g * pos, True)

    return _make(np.where(pos, x.data, 0.0), "relu", (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), True)

    return _make(out, "matmul", (a, b), bw)


def softmax(x, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.  Entries where ``where`` is False get exactly 0."""
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    d = x.data
    if where is not None:
        where = np.broadcast_to(np.asarray(where, dtype=bool), d.shape)
        d = np.where(where, d, -np.inf)
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = out * (g - (g * out).sum(axis=axis, keepdims=True))
        _accumulate(x, gx, True)

    return _make(out, "softmax", (x,), bw)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), "sum", (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, "reshape", (x,), bw)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), "transpose", (x,), bw)


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    a1, a2 = _norm_axis(a1, x.ndim), _norm_axis(a2, x.ndim)
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat of an empty sequence")
    ax = _norm_axis(axis, xs[0].ndim)
    try:
        out = np.concatenate([t.data for t in xs], axis=ax)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in xs)
        raise DimensionError(f"concat on axis {axis}: shapes {shapes} disagree off-axis") from None

    def bw(g):
        lo = 0
        for t in xs:
            hi = lo + t.shape[ax]
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])
            lo = hi

    return _make(out, "concat", tuple(xs), bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis if axis >= 0 else axis + xs[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in xs]
    return concat(expanded, axis=ax)


def index(x, key) -> Tensor:
    """Basic (slice / integer) indexing."""
    x = as_tensor(x)
    out = x.data[key]

    def bw(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[key] += g

    return _make(np.array(out, dtype=DTYPE), "index", (x,), bw)


def take(x, idx, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` at integer positions ``idx`` (any shape)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"take: index out of range for axis of length {n}")
    out = np.take(x.data, idx, axis=ax)

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        _accumulate(x, full, True)

    return _make(out, "take", (x,), bw)


# ---------------------------------------------------------------- differentiation

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf that ``loss`` depends on."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _TAPE
    if not loss.requires_grad:
        tape.clear()
        return
    loss.grad = np.ones_like(loss.data)
    leaves: dict[int, Tensor] = {}
    try:
        for out, parents, fn in reversed(tape.records):
            if out.grad is None:
                continue
            fn(out.grad)
            leaves.update((id(p), p) for p in parents)
            # intermediates release their buffers once consumed
            if out is not loss:
                out.grad = None
    finally:
        tape.clear()
    for p in leaves.values():
        if p.grad is not None:
            _check_finite(p.grad, "backward")


def _leaves(x) -> list[Tensor]:
    if isinstance(x, Tensor):
        return [x]
    if isinstance(x, Mapping):
        return list(x.values())
    return list(x)


def gradcheck(f: Callable, x, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``x`` may be a tensor or a sequence/mapping of tensors; ``f(x)`` must
    return a scalar tensor.  The error for each coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    leaves = _leaves(x)
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    _TAPE.clear()
    loss = f(x)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    worst = 0.0
    with no_grad(), unchecked():
        for t, ga in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                if not np.isfinite(num):
                    raise NumericError("gradcheck: non-finite finite-difference estimate")
                err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
                worst = max(worst, err)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
