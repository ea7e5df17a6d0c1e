"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A Tape records primitive operations in execution order; backward() replays the
record once, in reverse, accumulating adjoints per node. Only graphs reachable
from tensors with requires_grad=True are recorded, so plain data arithmetic
costs nothing extra.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError

Array = np.ndarray


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A numpy float64 array plus an adjoint slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _asarray(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._tracked = True
        self._entries.append((out, parents, backward_fn))


# One tape stack per thread: concurrent training runs must never record onto
# each other's tapes.
_ACTIVE = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = _ACTIVE.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data: Array, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p._tracked for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum an adjoint down to `shape` after numpy broadcasting expanded it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, out: Tensor) -> dict[Tensor, Array]:
    """Reverse sweep over `tape` seeding at scalar `out`.

    Returns the gradient per requires_grad leaf and accumulates the same
    values into each leaf's .grad slot. Each recorded node is visited once.
    """
    if out.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {out.shape}")
    adjoint: dict[int, Array] = {id(out): np.ones_like(out.data)}
    leaf_grads: dict[Tensor, Array] = {}
    for node, parents, backward_fn in reversed(tape._entries):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(parents, backward_fn(g)):
            if pg is None or not parent._tracked:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg
            if parent.requires_grad:
                leaf_grads[parent] = adjoint[key]
    if out.requires_grad:
        leaf_grads[out] = np.ones_like(out.data)
    for leaf, g in leaf_grads.items():
        g = g.reshape(leaf.data.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        leaf_grads[leaf] = leaf.grad
    return leaf_grads


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-d")
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bwd(g: Array):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _emit(a.data @ b.data, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _lift(a)
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, idx) -> Tensor:
    """Indexing; supports basic slicing and integer-array row selection."""
    a = _lift(a)

    def bwd(g: Array):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), bwd)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)
    return _emit(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)
    return _emit(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = _lift(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(a.data)
    return _emit(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def square(a) -> Tensor:
    a = _lift(a)
    return _emit(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)

    def bwd(g: Array):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.size if axis is None else a.shape[axis]

    def bwd(g: Array):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _emit(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; adjoints pass through inside the interval."""
    a = _lift(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.log(total) + m
    soft = shifted / total

    def bwd(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _emit(out_data if keepdims else np.squeeze(out_data, axis=axis), (a,), bwd)


def stop_gradient(a) -> Tensor:
    a = _lift(a)
    return Tensor(a.data.copy())
