"""Small reverse-mode autodiff over float64 numpy arrays.

Every differentiable quantity in the model (hidden states, logits, per-frame
log-posteriors, losses) is a :class:`Value`. The graph is rebuilt on every
forward pass; :meth:`Value.backward` walks it in reverse topological order.

Leaf gradients accumulate across ``backward`` calls until :meth:`Value.zero_grad`
is called. Interior gradients are reset at the start of every ``backward``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block: every result is a constant."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Value", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        # interior nodes get their buffer at the start of backward()
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += g

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Propagate d(self)/d(node) into every reachable ``requires_grad`` node."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = trace(self)
        for node in order:
            if not node.is_leaf and node.requires_grad:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division by a Value is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def trace(root: Value) -> list[Value]:
    """Nodes reachable from ``root`` in topological order (inputs first).

    This ordered record is the tape for one forward pass. Each node appears once.
    """
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data, parents: Sequence[Value], backward, op: str) -> Value:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Value(data, op=op)
    return Value(data, requires_grad=needs, _parents=tuple(parents), _backward=backward if needs else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def scale(a: Value, c: float) -> Value:
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), backward, "scale")


def exp(a: Value) -> Value:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _node(out, (a,), backward, "exp")


def log(a: Value) -> Value:
    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward, "log")


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return _node(out, (a,), backward, "tanh")


def stop_gradient(a: Value) -> Value:
    """Same data as ``a``, detached from the graph."""
    return Value(a.data.copy(), requires_grad=False, op="stop_gradient")


# -- reductions ----------------------------------------------------------


def sum_(a: Value, axis=None, keepdims: bool = False) -> Value:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(data, (a,), backward, "sum")


def mean(a: Value, axis=None, keepdims: bool = False) -> Value:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra and shape --------------------------------------------


def matmul(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(data, (a, b), backward, "matmul")


def swapaxes(a: Value, ax1: int, ax2: int) -> Value:
    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), backward, "swapaxes")


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def take(a: Value, index) -> Value:
    """Basic numpy indexing (slices, ints) with a scatter backward."""

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a.grad += full

    return _node(a.data[index], (a,), backward, "take")


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[v.shape for v in values]}") from exc
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        for v, part in zip(values, np.split(g, splits, axis=axis)):
            v._accumulate(part)

    return _node(data, values, backward, "concat")


def embedding(table: Value, ids) -> Value:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _node(data, (table,), backward, "embedding")


def masked_fill(a: Value, mask, value: float) -> Value:
    """Entries where ``mask`` is true are replaced by ``value``; they get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, value, a.data)

    def backward(g):
        a._accumulate(np.where(mask, 0.0, g))

    return _node(data, (a,), backward, "masked_fill")


def avg_pool_time(a: Value, window: int = 2, stride: int = 2, axis: int = -2) -> Value:
    """Average pooling along ``axis``: ``T' = (T - window) // stride + 1``."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if n < window:
        raise ShapeError(f"avg_pool_time: length {n} shorter than window {window}")
    n_out = (n - window) // stride + 1

    def window_slice(k):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(k, k + stride * (n_out - 1) + 1, stride)
        return tuple(idx)

    data = sum(a.data[window_slice(k)] for k in range(window)) / window

    def backward(g):
        if a.requires_grad:
            for k in range(window):
                a.grad[window_slice(k)] += g / window

    return _node(data, (a,), backward, "avg_pool_time")


# -- normalisation ---------------------------------------------------------


def log_softmax(a: Value, axis: int = -1) -> Value:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), backward, "log_softmax")


def softmax(a: Value, axis: int = -1) -> Value:
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), backward, "softmax")


def layer_norm(a: Value, gain: Value, bias: Value, eps: float = 1e-5) -> Value:
    """Normalise the last axis to zero mean / unit variance, then ``* gain + bias``."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if a.requires_grad:
            gx = g * gain.data
            a._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _node(data, (a, gain, bias), backward, "layer_norm")


def zero_grads(params: Iterable[Value]) -> None:
    for p in params:
        p.zero_grad()
