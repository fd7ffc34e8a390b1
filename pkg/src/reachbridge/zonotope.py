"""Batched affine arithmetic (zonotopes) for closed-loop reachability.

A quantity is ``c + sum_i g_i e_i`` with noise symbols ``e_i`` in ``[-1, 1]``
shared across all quantities of one computation.  Nonlinear operations are
linearised at the centre value and the linearisation error over the current
range becomes a fresh symbol.  Because the slope and the centre only depend on
centre values, widening any input range can only scale generators up; the
resulting sets are monotone in the input ranges.
"""

from __future__ import annotations

import numpy as np

from .controllers import LdcNetwork, activate, activation_derivative
from .errors import DivergenceError

TWO_PI = 2.0 * np.pi


class SymbolTable:
    """Allocator of noise-symbol columns shared by the forms of one computation."""

    def __init__(self, batch: int, count: int = 0):
        self.batch = batch
        self.count = count

    def allocate(self, n: int = 1) -> int:
        start = self.count
        self.count += n
        return start


def _pad(g: np.ndarray, m: int) -> np.ndarray:
    k = g.shape[-1]
    if k == m:
        return g
    out = np.zeros(g.shape[:-1] + (m,))
    out[..., :k] = g
    return out


class Affine:
    """Batched scalar affine form: centre ``(B,)`` and generators ``(B, m)``."""

    __slots__ = ("c", "g", "table")
    __array_ufunc__ = None

    def __init__(self, c, g, table: SymbolTable):
        self.c = c
        self.g = g
        self.table = table

    @property
    def rad(self):
        return np.abs(self.g).sum(axis=-1)

    @property
    def lo(self):
        return self.c - self.rad

    @property
    def hi(self):
        return self.c + self.rad

    def _lift(self, other):
        if isinstance(other, Affine):
            return other
        return Affine(np.broadcast_to(np.asarray(other, dtype=float), self.c.shape), np.zeros((self.c.shape[0], 0)), self.table)

    def _with_error(self, c, g, err) -> "Affine":
        """Result with linear part ``(c, g)`` plus a fresh symbol of radius ``err``."""
        col = self.table.allocate()
        g = _pad(g, self.table.count)
        g[:, col] = err
        return Affine(c, g, self.table)

    def __neg__(self):
        return Affine(-self.c, -self.g, self.table)

    def __add__(self, other):
        o = self._lift(other)
        m = max(self.g.shape[-1], o.g.shape[-1])
        return Affine(self.c + o.c, _pad(self.g, m) + _pad(o.g, m), self.table)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Affine):
            k = np.asarray(other, dtype=float)
            return Affine(self.c * k, self.g * np.reshape(k, np.shape(k) + (1,)) if np.ndim(k) else self.g * k, self.table)
        m = max(self.g.shape[-1], other.g.shape[-1])
        g1, g2 = _pad(self.g, m), _pad(other.g, m)
        lin = self.c[:, None] * g2 + other.c[:, None] * g1
        return self._with_error(self.c * other.c, lin, self.rad * other.rad)

    __rmul__ = __mul__

    def reciprocal(self) -> "Affine":
        lo, hi = self.lo, self.hi
        if np.any((lo <= 0.0) & (hi >= 0.0)):
            raise DivergenceError("affine reciprocal over a range containing zero")
        c = self.c
        slope = -1.0 / (c * c)
        cands = [lo, hi, -c]
        err = _tangent_error(lambda y: 1.0 / y, c, 1.0 / c, slope, cands, lo, hi)
        return self._with_error(1.0 / c, slope[:, None] * self.g, err)

    def __truediv__(self, other):
        if isinstance(other, Affine):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def sqr(self) -> "Affine":
        r = self.rad
        return self._with_error(self.c * self.c, 2.0 * self.c[:, None] * self.g, r * r)

    def sin(self) -> "Affine":
        return self._periodic(np.sin, np.cos(self.c), np.arccos(np.clip(np.cos(self.c), -1.0, 1.0)), even=True)

    def cos(self) -> "Affine":
        return self._periodic(np.cos, -np.sin(self.c), np.arcsin(np.clip(np.sin(self.c), -1.0, 1.0)), even=False)

    def _periodic(self, f, slope, base, even: bool) -> "Affine":
        # stationary points of f(y) - slope * y: f'(y) = slope
        lo, hi, c = self.lo, self.hi, self.c
        if even:  # f' = cos: solutions +-base + 2 pi k
            roots = [base, -base]
        else:  # f' = -sin, so sin(y) = sin(c): solutions base + 2 pi k and pi - base + 2 pi k
            roots = [base, np.pi - base]
        cands = [lo, hi]
        narrow = (hi - lo) <= 2.0 * TWO_PI
        for r0 in roots:
            k0 = np.ceil((lo - r0) / TWO_PI)
            for j in range(3):
                cands.append(r0 + (k0 + j) * TWO_PI)
        err = _tangent_error(f, c, f(c), slope, cands, lo, hi)
        rad = self.rad
        err = np.where(narrow, err, np.minimum(0.5 * rad * rad, 2.0 + np.abs(slope) * rad))
        return self._with_error(f(c), slope[:, None] * self.g, err)

    def clamp(self, u_min: float, u_max: float) -> "Affine":
        c = self.c
        kappa = ((c > u_min) & (c < u_max)).astype(float)
        fc = np.clip(c, u_min, u_max)
        lo, hi = self.lo, self.hi
        cands = [lo, hi, np.full_like(c, u_min), np.full_like(c, u_max)]
        err = _tangent_error(lambda y: np.clip(y, u_min, u_max), c, fc, kappa, cands, lo, hi)
        return self._with_error(fc, kappa[:, None] * self.g, err)


def _tangent_error(f, c, fc, slope, candidates, lo, hi):
    """``max |f(y) - fc - slope (y - c)|`` over the candidates that lie in ``[lo, hi]``."""
    err = np.zeros_like(c)
    with np.errstate(all="ignore"):
        for y in candidates:
            y = np.broadcast_to(y, c.shape)
            inside = (y >= lo) & (y <= hi)
            gap = np.abs(f(y) - fc - slope * (y - c))
            err = np.maximum(err, np.where(inside, gap, 0.0))
    # float slack proportional to the magnitudes involved
    return err * (1.0 + 1e-12) + 1e-15 * (1.0 + np.abs(fc) + np.abs(slope) * np.maximum(np.abs(lo), np.abs(hi)))


def network_forward(net: LdcNetwork, xs: list[Affine]) -> Affine:
    """Push a list of scalar forms (one per input) through the network."""
    table = xs[0].table
    m = table.count
    c = np.stack([x.c for x in xs], axis=-1)
    g = np.stack([_pad(x.g, m) for x in xs], axis=1)  # (B, n, m)
    for layer in net.layers:
        c = c @ layer.weight.T + layer.bias
        g = np.einsum("oi,bim->bom", layer.weight, g)
        if layer.activation == "identity":
            continue
        rad = np.abs(g).sum(axis=-1)
        lo, hi = c - rad, c + rad
        slope = activation_derivative(layer.activation, c)
        fc = activate(layer.activation, c)
        cands = [lo, hi, -c]
        err = _tangent_error(lambda y, t=layer.activation: activate(t, y), c, fc, slope, cands, lo, hi)
        n = c.shape[-1]
        start = table.allocate(n)
        g = _pad(slope[..., None] * g, table.count)
        idx = np.arange(n)
        g[:, idx, start + idx] = err
        c = fc
    k = net.output_scale
    return Affine(k * c[:, 0], k * g[:, 0, :], table)


def box_forms(lo, hi) -> tuple[list[Affine], SymbolTable]:
    """One symbol per dimension for a batch of boxes ``(B, d)``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    B, d = lo.shape
    table = SymbolTable(B, d)
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    forms = []
    for j in range(d):
        g = np.zeros((B, d))
        g[:, j] = r[:, j]
        forms.append(Affine(c[:, j], g, table))
    return forms, table


def collapse_step(forms: list[Affine], keep: int) -> tuple[list[Affine], SymbolTable]:
    """Keep the first ``keep`` symbols and box every later one into one symbol per dimension.

    The boxed radius is the per-row sum of absolute values of the dropped
    columns, so the new set contains the old one.  The result uses a fresh
    table with ``keep + d`` symbols.
    """
    d = len(forms)
    m = forms[0].table.count
    B = forms[0].c.shape[0]
    table = SymbolTable(B, keep + d)
    out = []
    for j, f in enumerate(forms):
        g = _pad(f.g, m)
        new = np.zeros((B, keep + d))
        new[:, :keep] = g[:, :keep]
        new[:, keep + j] = np.abs(g[:, keep:]).sum(axis=-1)
        out.append(Affine(f.c, new, table))
    return out, table
