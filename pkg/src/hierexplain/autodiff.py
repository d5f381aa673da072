"""A small tape-free reverse-mode autodiff engine over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes the
incoming gradient back to them. :meth:`Tensor.backward` runs the closures in
reverse topological order. Only the operations the forecasters need exist.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    # make numpy defer "ndarray op Tensor" to the reflected Tensor methods
    __array_ufunc__ = None
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = ()):
        self.data = np.asarray(data, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.broadcast_to(grad, self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))
        if out.requires_grad:
            out._backward = lambda g: (self._accum(g), other._accum(g))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))
        if out.requires_grad:
            def back(g):
                self._accum(g * other.data)
                other._accum(g * self.data)
            out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, _parents=(self, other))
        if out.requires_grad:
            def back(g):
                self._accum(g / other.data)
                other._accum(-g * self.data / other.data ** 2)
            out._backward = back
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,))
        if out.requires_grad:
            def back(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)
            out._backward = back
        return out

    # shape

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        if out.requires_grad:
            def back(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))
            out._backward = back
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def take(self, index: np.ndarray, axis: int):
        """Gather along ``axis`` with an integer index array (repeats allowed)."""
        index = np.asarray(index)
        out = Tensor(np.take(self.data, index, axis=axis), _parents=(self,))
        if out.requires_grad:
            def back(g):
                full = np.zeros_like(self.data)
                # move the gathered axes to the front so add.at can scatter
                g_moved = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
                full_moved = np.moveaxis(full, axis, 0)
                np.add.at(full_moved, index, g_moved)
                self._accum(full)
            out._backward = back
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, _parents=(a, b))
    if out.requires_grad:
        def back(g):
            if a.requires_grad:
                bd = b.data if b.data.ndim > 1 else b.data[:, None]
                gg = g if b.data.ndim > 1 else g[..., None]
                a._accum(gg @ np.swapaxes(bd, -1, -2))
            if b.requires_grad:
                ad = a.data if a.data.ndim > 1 else a.data[None, :]
                gg = g if a.data.ndim > 1 else g[..., None, :]
                gb = np.swapaxes(ad, -1, -2) @ gg
                if b.data.ndim == 1:
                    gb = gb[..., 0]
                b._accum(gb)
        out._backward = back
    return out


def _unary(x: Tensor, value: np.ndarray, dvalue: Callable[[], np.ndarray]) -> Tensor:
    out = Tensor(value, _parents=(x,))
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * dvalue())
    return out


def tanh(x: Tensor) -> Tensor:
    v = np.tanh(x.data)
    return _unary(x, v, lambda: 1.0 - v * v)


def exp(x: Tensor) -> Tensor:
    v = np.exp(x.data)
    return _unary(x, v, lambda: v)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x: Tensor) -> Tensor:
    v = np.sqrt(x.data)
    return _unary(x, v, lambda: 0.5 / v)


def square(x: Tensor) -> Tensor:
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data)


def softplus(x: Tensor) -> Tensor:
    d = x.data
    v = np.logaddexp(0.0, d)
    return _unary(x, v, lambda: 0.5 * (1.0 + np.tanh(0.5 * d)))


def absolute(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tensors)
    if out.requires_grad:
        sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

        def back(g):
            for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
                t._accum(part)
        out._backward = back
    return out
