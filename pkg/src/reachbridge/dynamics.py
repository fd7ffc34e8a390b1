"""Discrete-time plant models for the pendulum, mountain-car and cart-pole benchmarks.

All update equations use the implicit unit time step: the printed update is
applied as-is, with no explicit ``dt``.  The same transition code serves three
purposes depending on the argument types (see :mod:`reachbridge.intervals`):
point evaluation, interval enclosure, and interval Jacobian enclosure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, NumericOverflowError, SimulationError
from .intervals import Dual, Interval, as_interval, cos, sin, sqr

BENCHMARKS = ("IP", "MC", "CP")
STATE_DIM = {"IP": 2, "MC": 2, "CP": 4}
STATE_NAMES = {
    "IP": ("theta", "theta_dot"),
    "MC": ("x", "v"),
    "CP": ("x", "v", "theta", "theta_dot"),
}

_DEFAULT_CONSTANTS = {
    "IP": {"m": 0.1, "I": 0.125, "L": 0.25, "c": 0.0},
    "MC": {"m": 2.5e-4, "F": 3.75e-7},
    "CP": {"m_c": 1.0, "m_p": 0.1, "l": 0.5},
}
_DEFAULT_GRAVITY = {"IP": 9.81, "MC": 10.0, "CP": 9.81}
# Actuation ranges are not given in the source material; these are configuration.
_DEFAULT_ACTUATION = {"IP": (-0.15, 0.15), "MC": (-1.0, 1.0), "CP": (-10.0, 10.0)}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]``; endpoints may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ContractViolation(f"box bounds differ in dimension: {lo.shape} vs {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ContractViolation("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ContractViolation(f"box lower bound exceeds upper bound: {lo} > {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, s) -> "Box":
        return cls(s, s)

    @classmethod
    def from_intervals(cls, pairs: Sequence[Sequence[float]]) -> "Box":
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def as_interval(self) -> Interval:
        return Interval(self.lower, self.upper)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """Membership of one point (``(d,)``) or a batch (``(n, d)``)."""
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower - tol) & (p <= self.upper + tol), axis=-1)

    def contains_box(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol))

    def intersect(self, other: "Box") -> "Box | None":
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        if np.any(lo > hi):
            return None
        return Box(lo, hi)

    def hull(self, other: "Box") -> "Box":
        return Box(np.minimum(self.lower, other.lower), np.maximum(self.upper, other.upper))

    def inflate(self, r) -> "Box":
        return Box(self.lower - r, self.upper + r)

    def split(self) -> list["Box"]:
        """Bisect every dimension at its midpoint (``2**d`` children)."""
        mid = self.center
        children = []
        for corner in range(2 ** self.dim):
            lo = self.lower.copy()
            hi = self.upper.copy()
            for k in range(self.dim):
                if (corner >> k) & 1:
                    lo[k] = mid[k]
                else:
                    hi[k] = mid[k]
            children.append(Box(lo, hi))
        return children

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def to_list(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.lower, self.upper)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box):
            return NotImplemented
        return bool(np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper))

    def __hash__(self) -> int:
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __repr__(self) -> str:
        return f"Box({self.to_list()})"


@dataclass(frozen=True)
class PlantParams:
    """Benchmark id, physical constants, gravity and actuation range."""

    benchmark: str
    constants: Mapping[str, float] = field(default_factory=dict)
    g: float | None = None
    u_min: float | None = None
    u_max: float | None = None

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ContractViolation(f"unknown benchmark {self.benchmark!r}; expected one of {BENCHMARKS}")
        consts = dict(_DEFAULT_CONSTANTS[self.benchmark])
        unknown = set(self.constants) - set(consts)
        if unknown:
            raise ContractViolation(f"unknown constants for {self.benchmark}: {sorted(unknown)}")
        consts.update({k: float(v) for k, v in self.constants.items()})
        for name, value in consts.items():
            if not np.isfinite(value):
                raise ContractViolation(f"constant {name} must be finite")
            if name == "c":
                if value < 0:
                    raise ContractViolation("damping c must be >= 0")
            elif value <= 0:
                raise ContractViolation(f"constant {name} must be > 0")
        object.__setattr__(self, "constants", MappingProxyType(consts))
        g = _DEFAULT_GRAVITY[self.benchmark] if self.g is None else float(self.g)
        if not g > 0:
            raise ContractViolation("gravity must be > 0")
        object.__setattr__(self, "g", g)
        lo, hi = _DEFAULT_ACTUATION[self.benchmark]
        u_min = lo if self.u_min is None else float(self.u_min)
        u_max = hi if self.u_max is None else float(self.u_max)
        if not u_min <= u_max:
            raise ContractViolation("actuation bounds must satisfy u_min <= u_max")
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)

    @property
    def state_dim(self) -> int:
        return STATE_DIM[self.benchmark]

    def clamp(self, u):
        return np.clip(u, self.u_min, self.u_max)

    def __getitem__(self, name: str) -> float:
        return self.constants[name]


def _ip(p: PlantParams, s, u):
    m, inertia, length, c = p["m"], p["I"], p["L"], p["c"]
    theta, omega = s
    return [theta + omega, omega + (u - c * omega + m * p.g * length * sin(theta)) / inertia]


def _mc(p: PlantParams, s, u):
    m, force = p["m"], p["F"]
    x, v = s
    return [x + v, v + (force / m) * u - m * p.g * cos(3.0 * x)]


def _cp(p: PlantParams, s, u):
    m_c, m_p, length = p["m_c"], p["m_p"], p["l"]
    total = m_c + m_p
    x, v, theta, omega = s
    st, ct = sin(theta), cos(theta)
    omega2 = sqr(omega)
    theta_acc = (p.g * st + ct * ((-u - m_p * length * omega2 * st) / total)) / (
        length * (4.0 / 3.0 - m_p * sqr(ct) / total)
    )
    v_next = v + (u + m_p * length * (omega2 * st - theta_acc * ct)) / total
    return [x + v, v_next, theta + omega, omega + theta_acc]


_TRANSITIONS: dict[str, Callable] = {"IP": _ip, "MC": _mc, "CP": _cp}


def _check_dim(params: PlantParams, s: np.ndarray):
    if s.shape[-1] != params.state_dim:
        raise ContractViolation(
            f"{params.benchmark} state has dimension {params.state_dim}, got {s.shape[-1]}"
        )


def step(params: PlantParams, s, u) -> np.ndarray:
    """One transition of the plant; ``s`` may be ``(d,)`` or a batch ``(n, d)``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dim(params, s)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u))):
        raise ContractViolation("state and action must be finite")
    cols = [s[..., k] for k in range(params.state_dim)]
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.stack(_TRANSITIONS[params.benchmark](params, cols, u), axis=-1)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"{params.benchmark} step produced a non-finite state")
    return out


def step_interval_arrays(params: PlantParams, lo, hi, u_lo, u_hi) -> tuple[np.ndarray, np.ndarray]:
    """Batched interval transition on ``(..., d)`` bounds; returns new bounds."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    cols = [Interval(lo[..., k], hi[..., k]) for k in range(params.state_dim)]
    u = Interval(u_lo, u_hi)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _TRANSITIONS[params.benchmark](params, cols, u)
    out = [as_interval(o) for o in out]
    return np.stack([o.lo for o in out], axis=-1), np.stack([o.hi for o in out], axis=-1)


def step_interval(params: PlantParams, s_box: Box, u_interval: Sequence[float]) -> Box:
    """Sound enclosure of ``step(s, u)`` over ``s in s_box`` and ``u in u_interval``."""
    _check_dim(params, s_box.lower)
    u_lo, u_hi = (float(v) for v in u_interval)
    if not u_lo <= u_hi:
        raise ContractViolation(f"empty control interval [{u_lo}, {u_hi}]")
    lo, hi = step_interval_arrays(params, s_box.lower, s_box.upper, u_lo, u_hi)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise NumericOverflowError(f"{params.benchmark} interval step produced a non-finite bound")
    return Box(lo, hi)


def jacobian_interval(params: PlantParams, lo, hi, u_lo, u_hi):
    """Interval enclosures of the state and action Jacobians over a box.

    Returns ``(fs_lo, fs_hi, fu_lo, fu_hi)`` with shapes ``(..., d, d)`` and
    ``(..., d)``; ``fs[..., i, j]`` bounds ``d f_i / d s_j``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = params.state_dim
    values = [Interval(lo[..., k], hi[..., k]) for k in range(d)] + [Interval(u_lo, u_hi)]
    variables = Dual.variables(values)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _TRANSITIONS[params.benchmark](params, variables[:d], variables[d])
    batch = np.broadcast_shapes(lo.shape[:-1], np.shape(u_lo), np.shape(u_hi))
    fs_lo = np.empty(batch + (d, d))
    fs_hi = np.empty(batch + (d, d))
    fu_lo = np.empty(batch + (d,))
    fu_hi = np.empty(batch + (d,))
    for i, fi in enumerate(out):
        grads = fi.grad if isinstance(fi, Dual) else [0.0] * (d + 1)
        for j, gij in enumerate(grads):
            gi = as_interval(gij)
            if j < d:
                fs_lo[..., i, j] = gi.lo
                fs_hi[..., i, j] = gi.hi
            else:
                fu_lo[..., i] = gi.lo
                fu_hi[..., i] = gi.hi
    return fs_lo, fs_hi, fu_lo, fu_hi


def jacobian_point(params: PlantParams, s, u):
    """Exact Jacobians ``(f_s, f_u)`` at a point (batched)."""
    s = np.asarray(s, dtype=float)
    fs_lo, _, fu_lo, _ = jacobian_interval(params, s, s, u, u)
    return fs_lo, fu_lo


def simulate(params: PlantParams, controller: Callable, s0, T: int) -> np.ndarray:
    """Closed-loop rollout ``[s0, phi(s0, 1), ..., phi(s0, T)]``.

    ``controller`` maps a state (or batch of states) to actions; actions are
    clamped to the actuation range before each step.  A batch of initial
    states ``(n, d)`` gives a ``(T + 1, n, d)`` array.
    """
    if T < 0:
        raise ContractViolation("horizon T must be >= 0")
    s = np.asarray(s0, dtype=float)
    _check_dim(params, s)
    traj = np.empty((T + 1,) + s.shape)
    traj[0] = s
    for t in range(T):
        try:
            u = params.clamp(np.asarray(controller(s), dtype=float))
            s = step(params, s, u)
        except (ContractViolation, NumericOverflowError, FloatingPointError) as exc:
            raise SimulationError(f"rollout failed at t={t}: {exc}", time_index=t) from exc
        traj[t + 1] = s
    return traj
