"""Reverse-mode autodiff over dense float64 arrays.

Every value flowing through the network is a `Tensor` wrapping a numpy
array. Operations build a graph of backward closures; calling `backward()`
on a scalar output fills `grad` on every reachable node that requires it.
Gradient arrays are never mutated in place, only replaced, so views handed
to the accumulator stay valid.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the computation graph: float64 data plus an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Backpropagate from a scalar output through the graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Arithmetic sugar used by the layer ops; operands may be Tensors,
    # scalars, or plain arrays (treated as constants).
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build a graph node; drops the backward closure when no parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        accumulate(a, unbroadcast(g, a.shape))
        accumulate(b, unbroadcast(g, b.shape))

    return make_op(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        accumulate(a, unbroadcast(g * b.data, a.shape))
        accumulate(b, unbroadcast(g * a.data, b.shape))

    return make_op(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: accumulate(a, -g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    data = np.matmul(a.data, b.data)

    def backward(g):
        accumulate(a, unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        accumulate(b, unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return make_op(data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,),
                   lambda g: accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,),
                   lambda g: accumulate(a, g.transpose(inverse)))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(p, g[tuple(idx)])

    return make_op(data, parts, backward)


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Index one slice along `axis`, dropping that axis."""
    data = np.take(a.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        gx[tuple(idx)] = g
        accumulate(a, gx)

    return make_op(data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` elements along `axis`, keeping the axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        accumulate(a, gx)

    return make_op(a.data[idx], (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    return make_op(np.asarray(a.data.sum()), (a,),
                   lambda g: accumulate(a, np.broadcast_to(g, a.shape).copy()))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return make_op(s, (a,), backward)
