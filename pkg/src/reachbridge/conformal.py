"""Split-conformal bounds on the discrepancy between the oracle and a distilled controller."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .controllers import LdcNetwork, evaluate
from .dynamics import Box, PlantParams, simulate
from .errors import ContractViolation, OracleError, SimulationError
from .highdim import HdcOracle, hdc_trajectory

TRAJECTORY = "trajectory"
ACTION = "action"
KINDS = (TRAJECTORY, ACTION)

# How action scores pair the two controllers: each on its own rollout, or both on the oracle's states.
PAIRED = "paired"
TEACHER_STATES = "teacher-states"


def conformal_rank(k: int, alpha: float) -> int:
    """``r = ceil((k + 1)(1 - alpha))``, guarded against float noise in the product."""
    x = (k + 1) * (1.0 - alpha)
    r = math.ceil(x)
    if r - x > 1 - 1e-9:
        r -= 1
    return r


def conformal_quantile(scores, alpha: float) -> float:
    """Rank-``r`` element of the scores augmented with ``+inf`` (1-based, non-decreasing order)."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    if s.size == 0:
        raise ContractViolation("at least one calibration score is required")
    if not 0.0 < alpha < 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1), got {alpha!r}")
    if np.any(np.isnan(s)):
        raise ContractViolation("scores must not be NaN")
    r = conformal_rank(s.size, alpha)
    augmented = np.sort(np.append(s, np.inf), kind="stable")
    return float(augmented[r - 1])


@dataclass(frozen=True)
class DiscrepancyBound:
    kind: str
    value: float
    alpha: float
    k: int
    region: Box | None = None
    seed: int = 0
    scores: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"kind must be one of {KINDS}")
        if np.isnan(self.value) or self.value < 0:
            raise ContractViolation("bound value must be >= 0 (or +inf)")
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolation("alpha must lie in (0, 1)")

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))

    @classmethod
    def from_scores(cls, kind, scores, alpha, region=None, seed=0) -> "DiscrepancyBound":
        scores = np.asarray(scores, dtype=float).reshape(-1)
        return cls(kind, conformal_quantile(scores, alpha), alpha, scores.size, region, seed, tuple(scores.tolist()))


def ldc_policy(ldc: LdcNetwork, params: PlantParams):
    def policy(s):
        return params.clamp(evaluate(ldc, s))

    return policy


@dataclass(frozen=True)
class PairedRollouts:
    """Oracle and LDC closed loops from the same initial states; arrays are ``(T + 1, N, ...)``."""

    s0: np.ndarray
    hd_states: np.ndarray
    hd_actions: np.ndarray
    ld_states: np.ndarray
    ld_actions: np.ndarray
    ld_on_hd: np.ndarray

    def trajectory_scores(self) -> np.ndarray:
        return np.max(np.sum(np.abs(self.hd_states - self.ld_states), axis=-1), axis=0)

    def action_scores(self, pairing: str = PAIRED) -> np.ndarray:
        other = self.ld_actions if pairing == PAIRED else self.ld_on_hd
        return np.max(np.abs(self.hd_actions - other), axis=0)


def paired_rollouts(
    ldc: LdcNetwork, hdc: HdcOracle, params: PlantParams, region: Box, N: int, T: int, seed: int = 0, stream_offset: int = 0
) -> PairedRollouts:
    """Sample ``N`` initial states once and roll out both controllers from each."""
    if N < 1:
        raise ContractViolation("N must be >= 1")
    s0 = region.sample(np.random.default_rng(seed), N)
    streams = np.arange(N, dtype=np.uint64) + np.uint64(stream_offset)
    try:
        hd_states, hd_actions = hdc_trajectory(hdc, s0, T, seed, streams)
    except (SimulationError, OracleError) as exc:
        raise SimulationError(f"oracle rollout failed during calibration in {region}: {exc}") from exc
    policy = ldc_policy(ldc, params)
    ld_states = simulate(params, policy, s0, T)
    return PairedRollouts(s0, hd_states, hd_actions, ld_states, policy(ld_states), policy(hd_states))


def traj_discrepancy(ldc, hdc, params, region: Box, alpha: float, N: int, T: int, seed: int = 0) -> DiscrepancyBound:
    """Conformal bound on ``max_t ||phi_hd(s, t) - phi_ld(s, t)||_1`` over the region."""
    rolls = paired_rollouts(ldc, hdc, params, region, N, T, seed)
    return DiscrepancyBound.from_scores(TRAJECTORY, rolls.trajectory_scores(), alpha, region, seed)


def action_discrepancy(
    ldc, hdc, params, region: Box, alpha: float, N: int, T: int, seed: int = 0, pairing: str = PAIRED
) -> DiscrepancyBound:
    """Conformal bound on the largest action gap along the paired rollouts.

    ``pairing="paired"`` compares each controller on its own trajectory;
    ``"teacher-states"`` evaluates both on the oracle's trajectory, which is
    the score the state-coupled reach engine needs.
    """
    if pairing not in (PAIRED, TEACHER_STATES):
        raise ContractViolation(f"unknown pairing {pairing!r}")
    rolls = paired_rollouts(ldc, hdc, params, region, N, T, seed)
    return DiscrepancyBound.from_scores(ACTION, rolls.action_scores(pairing), alpha, region, seed)


BOUNDS_COLUMNS = ("region", "lower", "upper", "kind", "alpha", "N", "value", "seed")


def bounds_csv(rows, header: str | None = None) -> str:
    """CSV text for ``(region_id, DiscrepancyBound)`` rows."""
    buf = io.StringIO()
    if header:
        buf.write(header.rstrip("\n") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BOUNDS_COLUMNS)
    for region_id, b in rows:
        lower = " ".join(repr(float(v)) for v in b.region.lower) if b.region is not None else ""
        upper = " ".join(repr(float(v)) for v in b.region.upper) if b.region is not None else ""
        writer.writerow([region_id, lower, upper, b.kind, repr(b.alpha), b.k, repr(float(b.value)), b.seed])
    return buf.getvalue()
