"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its parents and a gradient rule on the produced
Tensor; the recorded graph is the tape. Creation order is a topological
order (operands always exist before their result), so the backward pass
sorts reachable nodes by creation index and visits each exactly once,
newest first. Single-threaded use of one graph is assumed; independent
graphs on separate threads do not interact.

Shapes follow numpy broadcasting. Matrix operations act on the last two
axes, with leading axes treated as a batch.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager

import numpy as np


class AutodiffError(Exception):
    """Base class for tape construction and backward-pass failures."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_ids = itertools.count()
# Recording state is per-thread: graphs built on different threads are
# independent, so one thread's no_grad block must not stop another's
# recording.
_local = threading.local()
_debug_checks = False
_corrupt_matmul_backward = False


def _recording() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (forward evaluation only)."""
    prev = _recording()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def set_debug_checks(flag: bool) -> None:
    """Warn on degenerate inputs (for now: all-masked softmax rows)."""
    global _debug_checks
    _debug_checks = bool(flag)


def set_backward_corruption(flag: bool) -> None:
    """Deliberately mis-scale the matmul backward rule.

    Verification hook only: lets a gradient checker prove it can detect a
    broken rule. Never enable during real training.
    """
    global _corrupt_matmul_backward
    _corrupt_matmul_backward = bool(flag)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Dense float64 array, optionally linked into the recorded graph."""

    __slots__ = ("_data", "grad", "requires_grad", "name", "_parents", "_rule", "_tid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self._data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._rule = None
        self._tid = next(_ids)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # Always hold a real ndarray: numpy arithmetic on 0-d arrays hands
        # back immutable scalars, which would break in-place updates.
        self._data = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; scalars become constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op vocabulary")
        return mul(self, _as_tensor(1.0 / float(other)))

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad over the reachable graph.

        Requires a scalar. Parameters the loss does not depend on keep
        grad=None, read as zero.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        nodes: list[Tensor] = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._tid, reverse=True)
        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._rule is None or t.grad is None:
                continue
            for p, g in zip(t._parents, t._rule(t.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._rule = rule
    return out


def custom_op(data: np.ndarray, parents: tuple[Tensor, ...], rule, name: str) -> Tensor:
    """Record a fused operation with a hand-written gradient rule.

    `rule` receives the output gradient and must return one gradient per
    parent (None for parents that need none), already shaped like them.
    """
    return _from_op(data, parents, rule, name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(a.data + b.data, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), rule, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        data = a.data * b.data
    return _from_op(data, (a, b), rule, "mul")


def neg(a: Tensor) -> Tensor:
    def rule(g):
        return (-g,)

    return _from_op(-a.data, (a,), rule, "neg")


def squared_difference(a: Tensor, b: Tensor) -> Tensor:
    diff = a.data - b.data

    def rule(g):
        d = 2.0 * diff * g
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)

    return _from_op(diff * diff, (a, b), rule, "squared_difference")


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out_data = np.exp(a.data)

    def rule(g):
        return (g * out_data,)

    return _from_op(out_data, (a,), rule, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def rule(g):
        return (g / a.data,)

    return _from_op(out_data, (a,), rule, "log")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def rule(g):
        return (g * (1.0 - out_data * out_data),)

    return _from_op(out_data, (a,), rule, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def rule(g):
        return (g * out_data * (1.0 - out_data),)

    return _from_op(out_data, (a,), rule, "sigmoid")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0

    def rule(g):
        return (g * np.where(pos, 1.0, slope),)

    return _from_op(np.where(pos, a.data, slope * a.data), (a,), rule, "leaky_relu")


def elu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out_data = np.where(pos, a.data, np.expm1(np.minimum(a.data, 0.0)))

    def rule(g):
        return (g * np.where(pos, 1.0, out_data + 1.0),)

    return _from_op(out_data, (a,), rule, "elu")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def rule(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        if _corrupt_matmul_backward:
            db = db * 1.001
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _from_op(a.data @ b.data, (a, b), rule, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {a.shape}")

    def rule(g):
        return (np.swapaxes(g, -1, -2),)

    return _from_op(np.swapaxes(a.data, -1, -2), (a,), rule, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def rule(g):
        return (g.reshape(a.shape),)

    return _from_op(a.data.reshape(shape), (a,), rule, "reshape")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def rule(g):
        return (_unbroadcast(g, a.shape),)

    return _from_op(np.broadcast_to(a.data, shape).copy(), (a,), rule, "broadcast_to")


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule, "concat"
    )


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if a.ndim < 1:
        raise ShapeError("gather_rows needs at least 1 axis")
    if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for axis of size {a.shape[0]}")

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _from_op(a.data[idx], (a,), rule, "gather_rows")


# ---------------------------------------------------------------------------
# Reductions and softmax
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            for a in sorted(axes):
                g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def rule(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule, "reduce_sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))

    def rule(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), rule, "reduce_mean")


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to the mask.

    Masked-out entries are exactly zero. Rows with an empty mask come back
    all-zero (flagged when debug checks are on). Overflow-safe via
    per-row max subtraction.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    x = logits.data
    row_max = np.max(np.where(m, x, -np.inf), axis=-1, keepdims=True)
    empty = ~np.isfinite(row_max)
    if _debug_checks and np.any(empty):
        warnings.warn("masked_softmax: row with no unmasked entries", stacklevel=2)
    row_max = np.where(empty, 0.0, row_max)
    e = np.exp(np.where(m, x - row_max, 0.0)) * m
    denom = e.sum(axis=-1, keepdims=True)
    out_data = e / np.where(denom == 0.0, 1.0, denom)

    def rule(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - inner),)

    return _from_op(out_data, (logits,), rule, "masked_softmax")


# ---------------------------------------------------------------------------
# Gradient extraction and verification
# ---------------------------------------------------------------------------

def gradients(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """d(loss)/d(p) for each parameter; zeros for parameters off the path."""
    for p in params:
        p.zero_grad()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def grad_check(f, params: list[Tensor], eps: float = 1e-5, tol: float = 1e-4):
    """Compare recorded gradients of f(params) against central differences.

    f must be a deterministic function of the parameter values. Returns
    (max relative error, passed). The relative error denominator is
    max(1, |analytic|, |numeric|) per entry.
    """
    for p in params:
        p.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ShapeError("grad_check objective must be scalar")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.flat
            gflat = ga.reshape(-1)
            for i in range(p.data.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(params).data.item()
                flat[i] = orig - eps
                fm = f(params).data.item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]), abs(numeric))
                worst = max(worst, err)
    return worst, worst < tol
