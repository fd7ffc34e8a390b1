"""Vectorised interval arithmetic and forward-mode interval derivatives.

Plant transition functions are written once against plain ``+ - * /`` and the
:func:`sin` / :func:`cos` / :func:`sqr` helpers below.  Passing numpy arrays
evaluates the plant point-wise, passing :class:`Interval` objects produces a
sound enclosure, and passing :class:`Dual` objects over intervals yields an
enclosure of the Jacobian over a box.
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi
HALF_PI = 0.5 * np.pi


def _as_array(x):
    return np.asarray(x, dtype=float)


class Interval:
    """Closed intervals ``[lo, hi]`` with numpy broadcasting semantics."""

    __slots__ = ("lo", "hi")
    __array_ufunc__ = None

    def __init__(self, lo, hi=None):
        lo = _as_array(lo)
        hi = lo if hi is None else _as_array(hi)
        self.lo, self.hi = np.broadcast_arrays(lo, hi)

    @classmethod
    def point(cls, x) -> "Interval":
        return cls(x, x)

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def rad(self):
        return 0.5 * (self.hi - self.lo)

    @property
    def mag(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def __repr__(self) -> str:
        return f"Interval({self.lo!r}, {self.hi!r})"

    def __getitem__(self, idx) -> "Interval":
        return Interval(self.lo[idx], self.hi[idx])

    def contains(self, x, tol: float = 0.0):
        x = _as_array(x)
        return (x >= self.lo - tol) & (x <= self.hi + tol)

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __add__(self, other):
        if isinstance(other, Interval):
            return Interval(self.lo + other.lo, self.hi + other.hi)
        if isinstance(other, Dual):
            return NotImplemented
        other = _as_array(other)
        return Interval(self.lo + other, self.hi + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Interval):
            return Interval(self.lo - other.hi, self.hi - other.lo)
        if isinstance(other, Dual):
            return NotImplemented
        other = _as_array(other)
        return Interval(self.lo - other, self.hi - other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        if not isinstance(other, Interval):
            other = _as_array(other)
            a, b = self.lo * other, self.hi * other
            return Interval(np.minimum(a, b), np.maximum(a, b))
        p = (self.lo * other.lo, self.lo * other.hi, self.hi * other.lo, self.hi * other.hi)
        lo = np.minimum(np.minimum(p[0], p[1]), np.minimum(p[2], p[3]))
        hi = np.maximum(np.maximum(p[0], p[1]), np.maximum(p[2], p[3]))
        return Interval(lo, hi)

    __rmul__ = __mul__

    def reciprocal(self) -> "Interval":
        if np.any((self.lo <= 0.0) & (self.hi >= 0.0)):
            raise ZeroDivisionError("interval divisor contains zero")
        return Interval(1.0 / self.hi, 1.0 / self.lo)

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        if isinstance(other, Interval):
            return self * other.reciprocal()
        return self * (1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def sqr(self) -> "Interval":
        lo2, hi2 = self.lo * self.lo, self.hi * self.hi
        hi = np.maximum(lo2, hi2)
        lo = np.where((self.lo <= 0.0) & (self.hi >= 0.0), 0.0, np.minimum(lo2, hi2))
        return Interval(lo, hi)

    def sin(self) -> "Interval":
        return _sin_enclosure(self.lo, self.hi)

    def cos(self) -> "Interval":
        return _cos_enclosure(self.lo, self.hi)

    def hull(self, other: "Interval") -> "Interval":
        return Interval(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))


def _contains_phase(lo, hi, phase):
    """True where ``[lo, hi]`` contains some ``phase + 2*pi*k``."""
    k = np.ceil((lo - phase) / TWO_PI)
    return phase + k * TWO_PI <= hi


def _sin_enclosure(lo, hi) -> Interval:
    s_lo, s_hi = np.sin(lo), np.sin(hi)
    out_lo = np.minimum(s_lo, s_hi)
    out_hi = np.maximum(s_lo, s_hi)
    full = (hi - lo) >= TWO_PI
    out_hi = np.where(full | _contains_phase(lo, hi, HALF_PI), 1.0, out_hi)
    out_lo = np.where(full | _contains_phase(lo, hi, -HALF_PI), -1.0, out_lo)
    return Interval(out_lo, out_hi)


def _cos_enclosure(lo, hi) -> Interval:
    c_lo, c_hi = np.cos(lo), np.cos(hi)
    out_lo = np.minimum(c_lo, c_hi)
    out_hi = np.maximum(c_lo, c_hi)
    full = (hi - lo) >= TWO_PI
    out_hi = np.where(full | _contains_phase(lo, hi, 0.0), 1.0, out_hi)
    out_lo = np.where(full | _contains_phase(lo, hi, np.pi), -1.0, out_lo)
    return Interval(out_lo, out_hi)


class Dual:
    """Forward-mode value plus partial derivatives; components may be intervals."""

    __slots__ = ("val", "grad")
    __array_ufunc__ = None

    def __init__(self, val, grad):
        self.val = val
        self.grad = tuple(grad)

    @classmethod
    def variables(cls, values) -> list["Dual"]:
        n = len(values)
        out = []
        for i, v in enumerate(values):
            out.append(cls(v, [1.0 if j == i else 0.0 for j in range(n)]))
        return out

    def _wrap(self, other):
        if isinstance(other, Dual):
            return other
        return Dual(other, [0.0] * len(self.grad))

    def __neg__(self):
        return Dual(-self.val, [-g for g in self.grad])

    def __add__(self, other):
        o = self._wrap(other)
        return Dual(self.val + o.val, [a + b for a, b in zip(self.grad, o.grad)])

    __radd__ = __add__

    def __sub__(self, other):
        o = self._wrap(other)
        return Dual(self.val - o.val, [a - b for a, b in zip(self.grad, o.grad)])

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        o = self._wrap(other)
        return Dual(
            self.val * o.val,
            [_mul(a, o.val) + _mul(self.val, b) for a, b in zip(self.grad, o.grad)],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._wrap(other)
        inv = 1.0 / o.val
        val = self.val * inv
        return Dual(
            val,
            [_mul(a - _mul(val, b), inv) for a, b in zip(self.grad, o.grad)],
        )

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def sqr(self):
        v = self.val
        return Dual(sqr(v), [_mul(2.0 * v, g) for g in self.grad])

    def sin(self):
        c = cos(self.val)
        return Dual(sin(self.val), [_mul(c, g) for g in self.grad])

    def cos(self):
        ms = -sin(self.val)
        return Dual(cos(self.val), [_mul(ms, g) for g in self.grad])


def _mul(a, b):
    # Skip exact zeros so structural sparsity does not widen intervals.
    if isinstance(a, float) and a == 0.0:
        return 0.0
    if isinstance(b, float) and b == 0.0:
        return 0.0
    return a * b


def sin(x):
    if hasattr(x, "sin"):
        return x.sin()
    return np.sin(x)


def cos(x):
    if hasattr(x, "cos"):
        return x.cos()
    return np.cos(x)


def sqr(x):
    if hasattr(x, "sqr"):
        return x.sqr()
    return x * x


def as_interval(x) -> Interval:
    """Coerce a float, array or exact zero derivative into an :class:`Interval`."""
    if isinstance(x, Interval):
        return x
    return Interval.point(x)
