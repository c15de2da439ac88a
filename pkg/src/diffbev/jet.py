"""Forward-mode dual numbers carrying a batch of tangent directions.

A :class:`Jet` holds a value of shape ``S`` and tangents of shape ``(P, *S)``,
one row per seeded parameter. The helper functions below accept plain floats,
numpy arrays or jets, so geometry code written against them runs unchanged on
values alone or on values plus derivatives.
"""

from __future__ import annotations

import math

import numpy as np


class Jet:
    __slots__ = ("val", "tan")
    __array_ufunc__ = None  # make ndarray <op> Jet defer to Jet's reflected ops

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    @classmethod
    def const(cls, val, n_tan: int) -> "Jet":
        val = np.asarray(val, dtype=float)
        return cls(val if val.ndim else float(val), np.zeros((n_tan,) + val.shape))

    @property
    def n_tan(self) -> int:
        return self.tan.shape[0]

    def __repr__(self):
        return f"Jet({self.val!r}, tan{self.tan.shape})"

    # -- arithmetic -------------------------------------------------------

    def __neg__(self):
        return Jet(-self.val, -self.tan)

    def __add__(self, other):
        if isinstance(other, Jet):
            val = self.val + other.val
            nd = np.ndim(val)
            return Jet(val, _lift(self.tan, nd) + _lift(other.tan, nd))
        val = self.val + other
        return Jet(val, _grow(self.tan, np.shape(val)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            val = self.val - other.val
            nd = np.ndim(val)
            return Jet(val, _lift(self.tan, nd) - _lift(other.tan, nd))
        val = self.val - other
        return Jet(val, _grow(self.tan, np.shape(val)))

    def __rsub__(self, other):
        val = other - self.val
        return Jet(val, -_grow(self.tan, np.shape(val)))

    def __mul__(self, other):
        if isinstance(other, Jet):
            val = self.val * other.val
            nd = np.ndim(val)
            return Jet(val, _lift(self.tan, nd) * other.val + self.val * _lift(other.tan, nd))
        val = self.val * other
        return Jet(val, _lift(self.tan, np.ndim(val)) * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            inv = 1.0 / other.val
            val = self.val / other.val
            nd = np.ndim(val)
            return Jet(val, _lift(self.tan, nd) * inv - _lift(other.tan, nd) * (val * inv))
        val = self.val / other
        return Jet(val, _lift(self.tan, np.ndim(val)) / other)

    def __rtruediv__(self, other):
        val = other / self.val
        nd = np.ndim(val)
        return Jet(val, _lift(self.tan, nd) * (-val / self.val))

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Jet(self.val[idx], self.tan[(slice(None),) + idx])


def _lift(tan: np.ndarray, nd: int) -> np.ndarray:
    """Insert unit axes after the tangent axis so ``tan`` broadcasts like a value of ndim ``nd``."""
    own = tan.ndim - 1
    if own == nd:
        return tan
    return tan.reshape(tan.shape[:1] + (1,) * (nd - own) + tan.shape[1:])


def _grow(tan: np.ndarray, shape: tuple) -> np.ndarray:
    if tan.shape[1:] == shape:
        return tan
    return np.broadcast_to(_lift(tan, len(shape)), tan.shape[:1] + shape).copy()


# ---------------------------------------------------------------------------
# functions that work on floats, arrays and jets alike


def value(x):
    return x.val if isinstance(x, Jet) else x


def sqrt(x):
    if isinstance(x, Jet):
        v = np.sqrt(x.val) if np.ndim(x.val) else math.sqrt(x.val)
        return Jet(v, x.tan * (0.5 / v))
    return np.sqrt(x) if np.ndim(x) else math.sqrt(x)


def exp(x):
    if isinstance(x, Jet):
        v = np.exp(x.val) if np.ndim(x.val) else math.exp(x.val)
        return Jet(v, x.tan * v)
    return np.exp(x) if np.ndim(x) else math.exp(x)


def sin(x):
    if isinstance(x, Jet):
        return Jet(math.sin(x.val), x.tan * math.cos(x.val))
    return math.sin(x)


def cos(x):
    if isinstance(x, Jet):
        return Jet(math.cos(x.val), x.tan * -math.sin(x.val))
    return math.cos(x)


def x_of(v):
    return v[0]


def y_of(v):
    return v[1]


def vec(x, y):
    """Stack two scalars into a 2-vector."""
    if not isinstance(x, Jet) and not isinstance(y, Jet):
        return np.array([x, y], dtype=float)
    n = x.n_tan if isinstance(x, Jet) else y.n_tan
    tx = x.tan if isinstance(x, Jet) else np.zeros(n)
    ty = y.tan if isinstance(y, Jet) else np.zeros(n)
    return Jet(np.array([value(x), value(y)], dtype=float), np.stack([tx, ty], axis=-1))


def dot(a, b):
    return a[0] * b[0] + a[1] * b[1]


def cross(a, b):
    """z-component of the 2D cross product."""
    return a[0] * b[1] - a[1] * b[0]


def norm(a):
    return sqrt(dot(a, a))


def rotate(v, c, s):
    """Rotate 2-vector ``v`` by the angle whose cosine/sine are ``c``/``s``."""
    return vec(c * v[0] - s * v[1], s * v[0] + c * v[1])


def rotate_back(v, c, s):
    return vec(c * v[0] + s * v[1], -s * v[0] + c * v[1])
