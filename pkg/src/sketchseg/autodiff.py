"""Small reverse-mode differentiation engine over dense float64 arrays.

Every op executed while gradients are enabled, and with at least one input
that requires a gradient, appends a record to a thread-local tape. Because
records are appended at creation time the tape is already in topological
order, so ``backward`` only has to walk it in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass
class Record:
    kind: str
    inputs: tuple
    out: "Tensor"
    backward: Callable


class _State(threading.local):
    def __init__(self):
        self.tape: list[Record] = []
        self.enabled = True


_state = _State()


def tape() -> list[Record]:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._record: Record | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = Record(kind, tuple(inputs), out, backward_fn)
        out._record = rec
        _state.tape.append(rec)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def atan2(y, x) -> Tensor:
    """Elementwise angle of (x, y); the origin is outside the domain."""
    y, x = as_tensor(y), as_tensor(x)
    _check_broadcast("atan2", y, x)
    r2 = x.data ** 2 + y.data ** 2
    if np.any(r2 == 0):
        raise ValueError("atan2: gradient undefined at the origin")

    def bw(g):
        return (_unbroadcast(g * x.data / r2, y.shape),
                _unbroadcast(-g * y.data / r2, x.shape))

    return _emit("atan2", np.arctan2(y.data, x.data), (y, x), bw)


# -- elementwise unary -------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_min_zero(a) -> Tensor:
    """max(0, a); hinge building block, same subgradient convention as relu."""
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("clamp_min_zero", np.where(mask, a.data, 0.0), (a,),
                 lambda g: (g * mask,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data ** 2, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    """Square root with gradient 0 at exactly 0 (norm subgradient convention)."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _emit("sqrt", out, (a,), bw)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _emit("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    a = as_tensor(a)
    x = a.data
    if floor is not None:
        keep = x > floor
        x = np.where(keep, x, floor)
    else:
        keep = np.ones(x.shape, dtype=bool)
    return _emit("log", np.log(x), (a,), lambda g: (np.where(keep, g / x, 0.0),))


# -- reductions and shape ops ------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit("mean", out, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    out = a.data[key]

    def bw(g):
        full = np.zeros(a.shape)
        full[key] += g
        return (full,)

    return _emit("index", np.array(out, dtype=DTYPE), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, ts, bw)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", out, (a,), bw)


def max_over_rows(a) -> Tensor:
    """Column-wise max of a 2-D tensor, returned as 1 x D."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"max_over_rows: expected non-empty 2-D, got {a.shape}")
    arg = a.data.argmax(axis=0)
    cols = np.arange(a.shape[1])

    def bw(g):
        full = np.zeros(a.shape)
        full[arg, cols] = g[0]
        return (full,)

    return _emit("max_over_rows", a.data[arg, cols][None, :], (a,), bw)


def _segment_sum(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """out[r] = sum of g[i] over i with idx[i] == r."""
    out = np.zeros((n,) + g.shape[1:])
    if idx.size == 0:
        return out
    if np.all(idx[1:] >= idx[:-1]):
        sidx, gs = idx, g
    else:
        order = np.argsort(idx, kind="stable")
        sidx, gs = idx[order], g[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(gs, starts, axis=0)
    return out


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")

    def bw(g):
        return (_segment_sum(g, idx, a.shape[0]),)

    return _emit("gather_rows", a.data[idx], (a,), bw)


def scatter_max(a, idx, n: int) -> Tensor:
    """out[r] = max over rows i with idx[i] == r of a[i]; empty groups give 0.

    Gradient goes to the first maximising row of each group and channel.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter_max: values {a.shape} vs index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"scatter_max: index out of range for {n} outputs")
    out = np.zeros((n, a.shape[1]))
    if idx.size == 0:
        return _emit("scatter_max", out, (a,), lambda g: (np.zeros(a.shape),))
    if np.all(idx[1:] >= idx[:-1]):
        order = np.arange(len(idx))
        sidx = idx
    else:
        order = np.argsort(idx, kind="stable")
        sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    counts = np.diff(np.r_[starts, len(sidx)])
    groups = sidx[starts]
    # pad each group to the largest in-degree by repeating its first member;
    # repeats never change a max and argmax keeps the first occurrence
    slot = np.arange(counts.max())
    pos = order[starts[:, None] + np.where(slot[None, :] < counts[:, None], slot[None, :], 0)]
    vals = a.data[pos]                                   # G x K x C
    first = vals.argmax(axis=1)                          # first maximiser per channel
    rows = np.take_along_axis(pos, first, axis=1)         # G x C source rows
    cols = np.broadcast_to(np.arange(a.shape[1]), rows.shape)
    out[groups] = a.data[rows, cols]

    def bw(g):
        full = np.zeros(a.shape)
        full[rows, cols] = g[groups]
        return (full,)

    return _emit("scatter_max", out, (a,), bw)


_KINDS = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "relu": relu,
    "softmax_rows": softmax_rows, "max_over_rows": max_over_rows,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "gather_rows": gather_rows, "scatter_max": scatter_max, "sum": sum,
    "mean": mean, "square": square, "sqrt": sqrt, "atan2": atan2, "sin": sin,
    "cos": cos, "clamp_min_zero": clamp_min_zero,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf on the tape, then clear the tape.

    Leaves that are on the tape but do not influence ``loss`` get zeros.
    A loss that never touched the tape (a constant) is accepted and leaves
    every recorded leaf with a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    records = _state.tape
    _state.tape = []
    leaves: dict[int, Tensor] = {}
    for rec in records:
        for t in rec.inputs:
            if t.requires_grad and t._record is None:
                leaves[id(t)] = t
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape)
    for rec in reversed(records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if t._record is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
                continue
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros(t.shape)
    # detach recorded outputs so the graph can be garbage collected
    for rec in records:
        rec.out._record = None
        rec.out.requires_grad = False


def clear_tape() -> None:
    for rec in _state.tape:
        rec.out._record = None
    _state.tape = []


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               samples: int | None = None, rng=None, kink_tol: float = 1e-2) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates where forward and backward one-sided slopes disagree by more
    than ``kink_tol`` (relative) sit on a kink and are skipped. ``samples``
    restricts the check to that many random coordinates.
    """
    x.grad = None
    clear_tape()
    x.requires_grad = True
    out = f(x)
    base = float(out.data.reshape(-1)[0])
    if not np.isfinite(base):
        return float("inf")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if samples is not None and samples < flat.size:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = rng.choice(flat.size, size=samples, replace=False)
    worst = 0.0
    with no_grad():
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f(x).data.reshape(-1)[0])
            flat[c] = orig - eps
            fm = float(f(x).data.reshape(-1)[0])
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return float("inf")
            fwd, bwd = (fp - base) / eps, (base - fm) / eps
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                continue
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[c]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    x.grad = None
    return worst
