"""Reverse-mode differentiation over float64 numpy arrays.

A `Var` wraps an ndarray value plus closures that push adjoints to its
parents. One scalar loss, many parameters: build the graph forward, call
`backward(loss)` once, read `.grad` off the leaves. Gradients are never
mutated in place, so adjoint arrays may alias freely.
"""

from __future__ import annotations

import numpy as np

from . import numerics


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce an adjoint back to the shape the parent had before broadcasting
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


class Var:
    __slots__ = ("value", "grad", "_parents", "_push")

    # keep numpy from hijacking `ndarray <op> Var`
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, _parents=(), _push=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._push = _push

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # ---- arithmetic ----

    def __add__(self, other):
        if isinstance(other, Var):
            out = Var(self.value + other.value, (self, other))
            out._push = lambda g: (_acc(self, g), _acc(other, g))
        else:
            c = np.asarray(other, dtype=np.float64)
            out = Var(self.value + c, (self,))
            out._push = lambda g: (_acc(self, g),)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.value, (self,))
        out._push = lambda g: (_acc(self, -g),)
        return out

    def __sub__(self, other):
        return self + (-other) if isinstance(other, Var) else self + (-np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Var):
            out = Var(self.value * other.value, (self, other))
            out._push = lambda g: (_acc(self, g * other.value), _acc(other, g * self.value))
        else:
            c = np.asarray(other, dtype=np.float64)
            out = Var(self.value * c, (self,))
            out._push = lambda g: (_acc(self, g * c),)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            out = Var(self.value / other.value, (self, other))
            out._push = lambda g: (_acc(self, g / other.value),
                                   _acc(other, -g * self.value / (other.value * other.value)))
        else:
            c = np.asarray(other, dtype=np.float64)
            out = Var(self.value / c, (self,))
            out._push = lambda g: (_acc(self, g / c),)
        return out

    def __rtruediv__(self, other):
        c = np.asarray(other, dtype=np.float64)
        out = Var(c / self.value, (self,))
        out._push = lambda g: (_acc(self, -g * c / (self.value * self.value)),)
        return out

    def __pow__(self, p):
        p = float(p)
        out = Var(self.value ** p, (self,))
        out._push = lambda g: (_acc(self, g * p * self.value ** (p - 1.0)),)
        return out

    def __matmul__(self, other):
        if isinstance(other, Var):
            out = Var(self.value @ other.value, (self, other))
            out._push = lambda g: (_acc(self, g @ other.value.T), _acc(other, self.value.T @ g))
        else:
            c = np.asarray(other, dtype=np.float64)
            out = Var(self.value @ c, (self,))
            out._push = lambda g: (_acc(self, g @ c.T),)
        return out

    # ---- reductions / shaping ----

    def sum(self, axis=None, keepdims=False):
        out = Var(self.value.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.value.shape

        def push(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (_acc(self, np.broadcast_to(gg, shape)),)

        out._push = push
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Var(self.value.reshape(shape), (self,))
        orig = self.value.shape
        out._push = lambda g: (_acc(self, g.reshape(orig)),)
        return out

    def take_rows(self, idx):
        """Gather rows along axis 0; adjoint scatter-adds back."""
        idx = np.asarray(idx, dtype=np.intp)
        out = Var(self.value[idx], (self,))
        shape = self.value.shape

        def push(g):
            acc = np.zeros(shape, dtype=np.float64)
            np.add.at(acc, idx, g)
            return (_acc(self, acc),)

        out._push = push
        return out


def _acc(node: Var, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g, dtype=np.float64), node.value.shape)
    node.grad = g if node.grad is None else node.grad + g


# ---- elementwise primitives ----

def exp(x: Var) -> Var:
    out = Var(np.exp(x.value), (x,))
    out._push = lambda g: (_acc(x, g * out.value),)
    return out


def log(x: Var) -> Var:
    out = Var(np.log(x.value), (x,))
    out._push = lambda g: (_acc(x, g / x.value),)
    return out


def sqrt(x: Var) -> Var:
    out = Var(np.sqrt(x.value), (x,))
    out._push = lambda g: (_acc(x, 0.5 * g / out.value),)
    return out


def tanh(x: Var) -> Var:
    out = Var(np.tanh(x.value), (x,))
    out._push = lambda g: (_acc(x, g * (1.0 - out.value * out.value)),)
    return out


def softplus(x: Var) -> Var:
    out = Var(numerics.softplus(x.value), (x,))
    out._push = lambda g: (_acc(x, g * numerics.softplus_grad(x.value)),)
    return out


def log_ndtr(x: Var) -> Var:
    """log of the standard normal CDF (clamped, tail-stable)."""
    out = Var(numerics.std_normal_log_cdf(x.value), (x,))
    out._push = lambda g: (_acc(x, g * numerics.std_normal_log_cdf_grad(x.value)),)
    return out


def relu(x: Var) -> Var:
    out = Var(np.maximum(x.value, 0.0), (x,))
    out._push = lambda g: (_acc(x, g * (x.value > 0.0)),)
    return out


def clip_min(x: Var, lo: float) -> Var:
    """max(x, lo); gradient is zero where the floor is active."""
    out = Var(np.maximum(x.value, lo), (x,))
    out._push = lambda g: (_acc(x, g * (x.value > lo)),)
    return out


def concat_rows(xs) -> Var:
    """Concatenate along axis 0."""
    xs = list(xs)
    out = Var(np.concatenate([x.value for x in xs], axis=0), tuple(xs))
    sizes = [x.value.shape[0] for x in xs]
    offs = np.cumsum([0] + sizes)

    def push(g):
        return tuple(_acc(x, g[offs[i]:offs[i + 1]]) for i, x in enumerate(xs))

    out._push = push
    return out


# ---- graph traversal ----

def _topo(loss: Var) -> list:
    order, seen, stack = [], set(), [(loss, False)]
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


def backward(loss: Var) -> None:
    """Populate `.grad` on every node reachable from a scalar loss."""
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar-shaped, got {loss.value.shape}")
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._push is not None:
            node._push(node.grad)


def gradients(loss: Var, leaves: dict) -> dict:
    """Gradient map over named leaves; unreachable leaves get zeros."""
    backward(loss)
    return {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for name, v in leaves.items()}
