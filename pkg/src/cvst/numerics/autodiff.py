"""Minimal reverse-mode differentiation over numpy arrays.

Only the primitives the toy transforms need are provided: broadcasting
arithmetic, matmul, exp/log/abs/tanh/sqrt, clamp, reductions (sum, mean, max
pooling) and the structural ops (reshape, transpose, slicing, concatenation,
masked select).  A :class:`Tensor` built while gradients are disabled, or from
inputs that do not require gradients, carries no graph.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

# grad mode is per thread, so concurrent no_grad() blocks cannot clobber each other
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    # -- graph plumbing -------------------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._node(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._node(out, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        x = self.data
        return Tensor._node(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def back(g):
            gx = g @ np.swapaxes(y, -1, -2)
            gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._node(x @ y, (self, other), back)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # -- elementwise -----------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._node(np.log(x), (self,), lambda g: (g / x,))

    def abs(self):
        x = self.data
        return Tensor._node(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._node(out, (self,), lambda g: (g * (1.0 - out**2),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,))

    def clamp(self, lo=None, hi=None):
        """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
        x = self.data
        out = np.clip(x, lo, hi)
        keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            keep &= x >= lo
        if hi is not None:
            keep &= x <= hi
        return Tensor._node(out, (self,), lambda g: (g * keep,))

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def max(self, axis, keepdims=False):
        """Max pooling along ``axis``; ties share the gradient equally."""
        x = self.data
        out = x.max(axis=axis, keepdims=True)
        mask = x == out
        mask = mask / mask.sum(axis=axis, keepdims=True)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * mask,)

        return Tensor._node(out if keepdims else np.squeeze(out, axis), (self,), back)

    # -- structure -------------------------------------------------------

    def reshape(self, *shape):
        old = self.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._node(self.data[idx], (self,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return Tensor._node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.moveaxis(g, axis, 0)))


def where(cond, a, b):
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._node(np.where(cond, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                   _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def sigmoid(x):
    return (as_tensor(x) * 0.5).tanh() * 0.5 + 0.5


def softmax(x, axis):
    x = as_tensor(x)
    shifted = x - x.data.max(axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)
