"""Reachable tubes of LDC closed loops, their inflation, unions and goal checks.

Two engines are provided.  ``"interval"`` is plain box propagation: the LDC
output range over the current box feeds an interval plant step, optionally
after splitting the box into ``2^d`` pieces.  ``"affine"`` (the default) runs
the network and the plant equations in affine arithmetic (see
:mod:`reachbridge.zonotope`), so correlations between state coordinates
survive every step and the tube does not blow up on the unstable plants the
way pure boxes do.

For action inflation the affine engine treats the oracle as
``u = clamp(C_ld(s) + d)`` with ``|d| <= gamma``, i.e. the disturbance is
tied to the state it is applied at.  The interval engine follows the
decoupled form: the LDC range over the set widened by ``gamma``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import controllers
from .controllers import LdcNetwork
from . import zonotope
from .dynamics import _TRANSITIONS, Box, PlantParams, step_interval_arrays
from .errors import ContractViolation, DivergenceError

ENGINES = ("affine", "interval")


@dataclass(frozen=True)
class BoxUnion:
    """Finite union of boxes stored as ``lower``/``upper`` arrays of shape ``(K, d)``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.shape[0] == 0:
            raise ContractViolation("a box union needs at least one box and matching bounds")
        if np.any(lo > hi):
            raise ContractViolation("box union contains an empty box")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def of(cls, boxes) -> "BoxUnion":
        boxes = list(boxes)
        return cls(np.stack([b.lower for b in boxes]), np.stack([b.upper for b in boxes]))

    @property
    def boxes(self) -> list[Box]:
        return [Box(lo, hi) for lo, hi in zip(self.lower, self.upper)]

    def __len__(self) -> int:
        return self.lower.shape[0]

    def hull(self) -> Box:
        return Box(self.lower.min(axis=0), self.upper.max(axis=0))

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        inside = (p[..., None, :] >= self.lower - tol) & (p[..., None, :] <= self.upper + tol)
        return np.any(np.all(inside, axis=-1), axis=-1)

    def subset_of(self, box: Box) -> bool:
        return bool(np.all(self.lower >= box.lower) and np.all(self.upper <= box.upper))


@dataclass(frozen=True, eq=False)
class ReachTube:
    """Per-step box unions; ``lower``/``upper`` have shape ``(T + 1, K, d)``.

    ``unverifiable`` marks the sentinel produced by an infinite discrepancy
    bound: it stands for the whole state space and never passes a goal check.
    """

    lower: np.ndarray
    upper: np.ndarray
    unverifiable: bool = False
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.ndim == 2:
            lo, hi = lo[:, None, :], hi[:, None, :]
        if lo.shape != hi.shape or lo.ndim != 3:
            raise ContractViolation("tube bounds must have shape (T + 1, K, d)")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReachTube):
            return NotImplemented
        return (
            self.unverifiable == other.unverifiable
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    __hash__ = None

    @classmethod
    def sentinel(cls, T: int, d: int, **provenance) -> "ReachTube":
        lo = np.full((T + 1, 1, d), -np.inf)
        return cls(lo, -lo, True, provenance)

    @property
    def horizon(self) -> int:
        return self.lower.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.lower.shape[-1]

    def __len__(self) -> int:
        return self.lower.shape[0]

    def __getitem__(self, t: int) -> BoxUnion:
        return BoxUnion(self.lower[t], self.upper[t])

    def hull(self, t: int) -> Box:
        return Box(self.lower[t].min(axis=0), self.upper[t].max(axis=0))

    def contains(self, trajectories, tol: float = 0.0) -> np.ndarray:
        """Whether each trajectory ``(T + 1, n, d)`` lies in the tube at every step."""
        traj = np.asarray(trajectories, dtype=float)
        if traj.ndim == 2:
            traj = traj[:, None, :]
        if traj.shape[0] != len(self):
            raise ContractViolation("trajectory length must equal the tube length")
        inside = (traj[:, :, None, :] >= self.lower[:, None] - tol) & (traj[:, :, None, :] <= self.upper[:, None] + tol)
        return np.all(np.any(np.all(inside, axis=-1), axis=-1), axis=0)


# Engines ----------------------------------------------------------------------


def affine_tube_arrays(net: LdcNetwork, params: PlantParams, lo0, hi0, T: int, gamma=0.0):
    """Batched affine-arithmetic propagation.

    ``lo0``/``hi0`` are ``(B, d)`` initial boxes and ``gamma`` is a scalar or
    ``(B,)`` action disturbance radius.  Each step adds the disturbance as a
    fresh symbol on the pre-clamp action, pushes the forms through the plant
    equations and boxes that step's new symbols into one per dimension.
    Returns the bounding boxes ``(T + 1, B, d)``.
    """
    lo0 = np.atleast_2d(np.asarray(lo0, dtype=float))
    hi0 = np.atleast_2d(np.asarray(hi0, dtype=float))
    B, d = lo0.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (B,))
    forms, table = zonotope.box_forms(lo0, hi0)
    transition = _TRANSITIONS[params.benchmark]
    lower = np.empty((T + 1, B, d))
    upper = np.empty((T + 1, B, d))
    lower[0], upper[0] = lo0, hi0
    for t in range(T):
        keep = table.count
        with np.errstate(over="ignore", invalid="ignore"):
            action = zonotope.network_forward(net, forms)
            if np.any(gamma > 0):
                action = action._with_error(action.c, action.g, gamma)
            action = action.clamp(params.u_min, params.u_max)
            nxt = transition(params, forms, action)
        forms, table = zonotope.collapse_step(nxt, keep)
        for j, f in enumerate(forms):
            rad = f.rad
            lower[t + 1, :, j] = f.c - rad
            upper[t + 1, :, j] = f.c + rad
        if not (np.all(np.isfinite(lower[t + 1])) and np.all(np.isfinite(upper[t + 1]))):
            raise DivergenceError(f"reach set became non-finite at t={t + 1}", time_index=t + 1)
    return lower, upper


def interval_tube_arrays(net: LdcNetwork, params: PlantParams, lo0, hi0, T: int, gamma=0.0, split_depth: int = 0):
    """Batched box propagation with optional per-step splitting into ``2^(d * depth)`` pieces."""
    lo = np.atleast_2d(np.asarray(lo0, dtype=float))
    hi = np.atleast_2d(np.asarray(hi0, dtype=float))
    B, d = lo.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (B,))
    lower = np.empty((T + 1, B, d))
    upper = np.empty((T + 1, B, d))
    lower[0], upper[0] = lo, hi
    for t in range(T):
        plo, phi = _split_arrays(lo, hi, split_depth)  # (B, P, d)
        u_lo, u_hi = controllers.eval_interval_arrays(net, plo, phi)
        g = gamma[:, None]
        a_lo = params.clamp(u_lo - g)
        a_hi = params.clamp(u_hi + g)
        with np.errstate(over="ignore", invalid="ignore"):
            n_lo, n_hi = step_interval_arrays(params, plo, phi, a_lo, a_hi)
        lo, hi = n_lo.min(axis=1), n_hi.max(axis=1)
        lower[t + 1], upper[t + 1] = lo, hi
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DivergenceError(f"reach set became non-finite at t={t + 1}", time_index=t + 1)
    return lower, upper


def _split_arrays(lo, hi, depth: int):
    """Uniform split of each box into ``2^depth`` slices per axis; returns ``(B, P, d)``."""
    B, d = lo.shape
    n = 2**depth
    grid = np.stack(np.meshgrid(*[np.arange(n)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    w = (hi - lo) / n
    plo = lo[:, None, :] + grid[None] * w[:, None, :]
    phi = np.where(grid[None] == n - 1, hi[:, None, :], plo + w[:, None, :])
    return plo, phi


def _initial_pieces(region: Box, split_depth: int):
    lo, hi = _split_arrays(region.lower[None], region.upper[None], split_depth)
    return lo[0], hi[0]


def tube_arrays(net, params, lo0, hi0, T, gamma=0.0, engine: str = "affine", split_depth: int = 0):
    """Dispatch to an engine; for ``"affine"`` the split depth partitions the initial boxes."""
    if engine == "affine":
        return affine_tube_arrays(net, params, lo0, hi0, T, gamma)
    if engine == "interval":
        return interval_tube_arrays(net, params, lo0, hi0, T, gamma, split_depth)
    raise ContractViolation(f"unknown reach engine {engine!r}; expected one of {ENGINES}")


def _check_horizon(T: int):
    if T < 0:
        raise ContractViolation("horizon T must be >= 0")


def reach_tube_ldc(
    ldc: LdcNetwork, params: PlantParams, region: Box, T: int, engine: str = "affine", split_depth: int = 0
) -> ReachTube:
    """Sound tube of the LDC closed loop from every state of ``region``."""
    return _tube(ldc, params, region, T, 0.0, engine, split_depth, {"inflation": "none"})


def _tube(ldc, params, region, T, gamma, engine, split_depth, provenance):
    _check_horizon(T)
    if engine == "affine" and split_depth > 0:
        lo0, hi0 = _initial_pieces(region, split_depth)
        lower, upper = affine_tube_arrays(ldc, params, lo0, hi0, T, gamma)
        return ReachTube(lower, upper, False, {"region": region, "engine": engine, **provenance})
    lower, upper = tube_arrays(ldc, params, region.lower, region.upper, T, gamma, engine, split_depth)
    return ReachTube(lower, upper, False, {"region": region, "engine": engine, **provenance})


def inflate_tube_trajectory(tube: ReachTube, beta) -> ReachTube:
    """Widen every box by ``beta`` per axis (bounding box of the L1 ball around the tube)."""
    value = float(getattr(beta, "value", beta))
    kind = getattr(beta, "kind", "trajectory")
    if kind != "trajectory":
        raise ContractViolation("trajectory inflation needs a trajectory-kind bound")
    if np.isnan(value) or value < 0:
        raise ContractViolation("inflation bound must be >= 0")
    if not np.isfinite(value) or tube.unverifiable:
        return ReachTube.sentinel(tube.horizon, tube.dim, inflation="trajectory", bound=value)
    prov = {**tube.provenance, "inflation": "trajectory", "bound": value}
    return ReachTube(tube.lower - value, tube.upper + value, False, prov)


def reach_tube_action_inflated(
    ldc: LdcNetwork, params: PlantParams, region: Box, T: int, gamma, engine: str = "affine", split_depth: int = 0
) -> ReachTube:
    """Tube of the closed loop whose action may deviate from the LDC by at most ``gamma``."""
    value = float(getattr(gamma, "value", gamma))
    kind = getattr(gamma, "kind", "action")
    if kind != "action":
        raise ContractViolation("action inflation needs an action-kind bound")
    if np.isnan(value) or value < 0:
        raise ContractViolation("inflation bound must be >= 0")
    if not np.isfinite(value):
        return ReachTube.sentinel(T, region.dim, inflation="action", bound=value)
    return _tube(ldc, params, region, T, value, engine, split_depth, {"inflation": "action", "bound": value})


def union_tubes(tubes) -> ReachTube:
    """Element-wise union of equal-horizon tubes."""
    tubes = list(tubes)
    if not tubes:
        raise ContractViolation("need at least one tube")
    T = tubes[0].horizon
    if any(t.horizon != T for t in tubes) or any(t.dim != tubes[0].dim for t in tubes):
        raise ContractViolation("tubes must share horizon and dimension")
    if len(tubes) == 1:
        return tubes[0]
    if any(t.unverifiable for t in tubes):
        return ReachTube.sentinel(T, tubes[0].dim, inflation="union")
    lower = np.concatenate([t.lower for t in tubes], axis=1)
    upper = np.concatenate([t.upper for t in tubes], axis=1)
    return ReachTube(lower, upper, False, {"inflation": "union", "parts": len(tubes)})


FINAL = "final-set"
FROM_STEP = "from-step-k"


def check_goal(tube: ReachTube, goal: Box, mode: str = FINAL, k: int | None = None) -> bool:
    """Safe iff the designated sets lie inside ``goal``; sentinel tubes are never safe."""
    if tube.unverifiable:
        return False
    if mode == FINAL:
        steps = [tube.horizon]
    elif mode == FROM_STEP:
        if k is None or not 0 <= k <= tube.horizon:
            raise ContractViolation("from-step-k mode needs 0 <= k <= T")
        steps = range(k, tube.horizon + 1)
    else:
        raise ContractViolation(f"unknown goal mode {mode!r}")
    return all(tube[t].subset_of(goal) for t in steps)


def goal_steps(T: int, mode: str = FINAL, k: int | None = None) -> slice:
    """Time indices checked by a goal mode, as a slice into ``0..T``."""
    if mode == FINAL:
        return slice(T, T + 1)
    if mode == FROM_STEP:
        if k is None or not 0 <= k <= T:
            raise ContractViolation("from-step-k mode needs 0 <= k <= T")
        return slice(k, T + 1)
    raise ContractViolation(f"unknown goal mode {mode!r}")


def tube_csv(tube: ReachTube, header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header.rstrip("\n") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    d = tube.dim
    writer.writerow(["t", "box"] + [f"lo{j}" for j in range(d)] + [f"hi{j}" for j in range(d)])
    for t in range(len(tube)):
        for b in range(tube.lower.shape[1]):
            writer.writerow([t, b] + [repr(float(v)) for v in tube.lower[t, b]] + [repr(float(v)) for v in tube.upper[t, b]])
    return buf.getvalue()
