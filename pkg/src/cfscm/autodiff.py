"""A minimal reverse-mode tape over numpy arrays.

Only the operations the networks here need are supported: affine maps,
tanh/exp/log/sigmoid, elementwise arithmetic with broadcasting, clipping,
slicing, concatenation and reductions.  Values are float64 throughout.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, parents: Sequence["Var"] = (), backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = lift(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Var(a.value + b.value, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-lift(other))

    def __rsub__(self, other):
        return lift(other) + (-self)

    def __mul__(self, other):
        other = lift(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

        return Var(a.value * b.value, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = lift(other)
        a, b = self, other
        out = a.value / b.value

        def back(g):
            return (_unbroadcast(g / b.value, a.shape),
                    _unbroadcast(-g * out / b.value, b.shape))

        return Var(out, (a, b), back)

    def __rtruediv__(self, other):
        return lift(other) / self

    def __matmul__(self, other):
        other = lift(other)
        a, b = self, other

        def back(g):
            return g @ b.value.T, a.value.T @ g

        return Var(a.value @ b.value, (a, b), back)

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            return (full,)

        return Var(a.value[idx], (a,), back)

    def square(self):
        return Var(self.value ** 2, (self,), lambda g: (2.0 * g * self.value,))

    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # backprop -------------------------------------------------------------

    def backward(self, seed_grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.value) if seed_grad is None else np.asarray(seed_grad, float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return Var(out, (x,), lambda g: (g * (1.0 - out ** 2),))


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return Var(out, (x,), lambda g: (g * out,))


def log(x: Var) -> Var:
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def sigmoid(x: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x: Var, lo: float, hi: float) -> Var:
    """Hard clamp; the gradient is zero where the bound is active."""
    inside = (x.value >= lo) & (x.value <= hi)
    return Var(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    parts = [lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([p.value for p in parts], axis=axis), parts, back)


def logsumexp(x: Var, axis: int = -1) -> Var:
    m = x.value.max(axis=axis, keepdims=True)
    s = np.exp(x.value - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * s / tot,)

    return Var(out, (x,), back)


def log_softmax(x: Var) -> Var:
    lse = logsumexp(x, axis=-1)
    return x - Var(lse.value[..., None], (lse,), lambda g: (g.sum(axis=-1),))
