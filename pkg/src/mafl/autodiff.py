"""Sparse forward-mode algorithmic differentiation.

A :class:`Dual` carries a value and a sparse gradient ``{variable index:
partial}``.  Evaluating ordinary Python arithmetic on duals propagates exact
first derivatives through the expression graph, so any function written with
``+ - * / **`` and the helpers below gets its full gradient in one pass.
"""

from __future__ import annotations

import math

import numpy as np


def _scaled(grad, s):
    return {k: s * v for k, v in grad.items()}


def _axpy(g1, a, g2, b):
    """``a * g1 + b * g2`` for sparse gradients."""
    out = {k: a * v for k, v in g1.items()}
    for k, v in g2.items():
        out[k] = out.get(k, 0.0) + b * v
    return out


class Dual:
    __slots__ = ("val", "grad")

    def __init__(self, val, grad=None):
        self.val = float(val)
        self.grad = {} if grad is None else grad

    def __repr__(self):
        return f"Dual({self.val!r}, {len(self.grad)} partials)"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, _axpy(self.grad, 1.0, other.grad, 1.0))
        return Dual(self.val + other, dict(self.grad))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, _axpy(self.grad, 1.0, other.grad, -1.0))
        return Dual(self.val - other, dict(self.grad))

    def __rsub__(self, other):
        return Dual(other - self.val, _scaled(self.grad, -1.0))

    def __neg__(self):
        return Dual(-self.val, _scaled(self.grad, -1.0))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, _axpy(self.grad, other.val, other.grad, self.val))
        return Dual(self.val * other, _scaled(self.grad, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv, _axpy(self.grad, inv, other.grad, -self.val * inv * inv))
        return Dual(self.val / other, _scaled(self.grad, 1.0 / other))

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        return Dual(other * inv, _scaled(self.grad, -other * inv * inv))

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        if p == 0:
            return Dual(1.0)
        return Dual(self.val ** p, _scaled(self.grad, p * self.val ** (p - 1)))


def sqrt(x):
    if isinstance(x, Dual):
        r = math.sqrt(x.val)
        return Dual(r, _scaled(x.grad, 0.5 / r) if r > 0 else {})
    return math.sqrt(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(math.log(x.val), _scaled(x.grad, 1.0 / x.val))
    return math.log(x)


def exp(x):
    if isinstance(x, Dual):
        v = math.exp(x.val)
        return Dual(v, _scaled(x.grad, v))
    return math.exp(x)


def value_of(x) -> float:
    return x.val if isinstance(x, Dual) else float(x)


def seed_variables(values) -> list[Dual]:
    """One dual per entry of ``values`` with a unit partial on its own index."""
    return [Dual(v, {k: 1.0}) for k, v in enumerate(np.asarray(values, dtype=float).ravel())]


def dense_gradient(x, size: int) -> np.ndarray:
    out = np.zeros(size)
    if isinstance(x, Dual):
        for k, v in x.grad.items():
            out[k] += v
    return out


def value_and_grad(fn, point):
    """Evaluate ``fn`` on seeded duals and return ``(value, dense gradient)``."""
    point = np.asarray(point, dtype=float).ravel()
    out = fn(seed_variables(point))
    return value_of(out), dense_gradient(out, point.size)
