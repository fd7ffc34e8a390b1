"""Grids, the iterative distil/calibrate/refine loop, end-to-end verdicts and scoring."""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from . import conformal, reach
from .controllers import LdcNetwork
from .distill import TrainConfig, TrainReport, generate_dataset, train_ldc
from .dynamics import Box, PlantParams
from .errors import ContractViolation, DivergenceError, OracleError, SimulationError, TrainingError
from .highdim import HdcOracle, hdc_trajectory

ACTION = "action"
TRAJECTORY = "trajectory"
APPROACHES = (ACTION, TRAJECTORY)

SAFE, UNSAFE, UNKNOWN = 1, 0, -1
_LABELS = {SAFE: "safe", UNSAFE: "unsafe", UNKNOWN: "unknown"}

_PURPOSES = {"data": 1, "train": 2, "calibrate": 3, "gt": 4, "test": 5}


def derive_seed(master: int, key: str, purpose: str) -> int:
    """Independent 63-bit seed for ``(master seed, region or cell key, purpose)``."""
    ss = np.random.SeedSequence([master & 0xFFFFFFFFFFFFFFFF, zlib.crc32(key.encode()), _PURPOSES[purpose]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def box_key(box: Box) -> str:
    return ";".join(f"{a!r},{b!r}" for a, b in zip(box.lower.tolist(), box.upper.tolist()))


@dataclass(frozen=True)
class GridSpec:
    """Row-major tiling of ``S0`` by cells of the given widths (last cells may be thinner)."""

    S0: Box
    widths: tuple

    def __post_init__(self):
        w = np.broadcast_to(np.asarray(self.widths, dtype=float), (self.S0.dim,))
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ContractViolation("cell widths must be finite and > 0")
        if not (np.all(np.isfinite(self.S0.lower)) and np.all(np.isfinite(self.S0.upper))):
            raise ContractViolation("the initial set must be bounded")
        object.__setattr__(self, "widths", tuple(float(v) for v in w))

    @property
    def shape(self) -> tuple:
        span = self.S0.upper - self.S0.lower
        return tuple(max(1, math.ceil(s / w - 1e-9)) for s, w in zip(span, self.widths))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell bounds ``(n_cells, d)`` in row-major order."""
        axes_lo, axes_hi = [], []
        for k, (n, w) in enumerate(zip(self.shape, self.widths)):
            lo = self.S0.lower[k] + w * np.arange(n)
            hi = np.minimum(lo + w, self.S0.upper[k])
            hi[-1] = self.S0.upper[k]
            axes_lo.append(lo)
            axes_hi.append(hi)
        lo = np.stack(np.meshgrid(*axes_lo, indexing="ij"), axis=-1).reshape(-1, self.S0.dim)
        hi = np.stack(np.meshgrid(*axes_hi, indexing="ij"), axis=-1).reshape(-1, self.S0.dim)
        return lo, hi

    def cells(self) -> list[Box]:
        lo, hi = self.bounds()
        return [Box(a, b) for a, b in zip(lo, hi)]

    def __len__(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class VerifyConfig:
    approach: str = ACTION
    alpha: float = 0.05
    N: int = 60
    T: int = 30
    goal: Box | None = None
    goal_mode: str = reach.FINAL
    goal_k: int | None = None
    xi: float = 0.01
    eps: float = 1e-4
    lam: float = 5.0
    max_rounds: int = 3
    retry_budget: int = 2
    region_widths: tuple = (0.25,)
    n_init: int = 60
    train: TrainConfig = field(default_factory=TrainConfig)
    engine: str = "affine"
    split_depth: int = 0
    pairing: str = conformal.TEACHER_STATES
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ContractViolation(f"approach must be one of {APPROACHES}")
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolation(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not self.xi > 0:
            raise ContractViolation("xi must be > 0")
        if not (self.eps > 0 and self.lam > 0):
            raise ContractViolation("eps and lam must be > 0")
        if self.N < 1 or self.T < 0 or self.n_init < 1:
            raise ContractViolation("N >= 1, n_init >= 1 and T >= 0 are required")
        if self.max_rounds < 0 or self.retry_budget < 0:
            raise ContractViolation("refinement budgets must be >= 0")
        if self.goal is None:
            raise ContractViolation("a goal box is required")
        if self.engine not in reach.ENGINES:
            raise ContractViolation(f"engine must be one of {reach.ENGINES}")
        reach.goal_steps(self.T, self.goal_mode, self.goal_k)


@dataclass
class RegionResult:
    region: Box
    ldc: LdcNetwork
    bound: conformal.DiscrepancyBound
    report: TrainReport | None
    controller_id: str
    depth: int = 0
    eps: float = 0.0
    lam: float = 0.0
    goal_reached: bool = False
    notes: list = field(default_factory=list)


def _discrepancy(cfg: VerifyConfig, ldc, hdc, params, region, seed):
    rolls = conformal.paired_rollouts(ldc, hdc, params, region, cfg.N, cfg.T, seed)
    if cfg.approach == ACTION:
        scores = rolls.action_scores(cfg.pairing)
        kind = conformal.ACTION
    else:
        scores = rolls.trajectory_scores()
        kind = conformal.TRAJECTORY
    bound = conformal.DiscrepancyBound.from_scores(kind, scores, cfg.alpha, region, seed)
    steps = reach.goal_steps(cfg.T, cfg.goal_mode, cfg.goal_k)
    hd_ok = bool(np.all(cfg.goal.contains(rolls.hd_states[steps])))
    return bound, hd_ok


def region_tube(cfg: VerifyConfig, params, ldc, bound, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Approach-specific inflated tube bounds ``(T + 1, B, d)`` for boxes ``lo``/``hi``.

    Non-finite enclosures are returned as ``-inf``/``+inf`` instead of raising.
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    B, d = lo.shape
    if not bound.finite:
        full = np.full((cfg.T + 1, B, d), np.inf)
        return -full, full
    gamma = bound.value if cfg.approach == ACTION else 0.0
    try:
        tl, tu = reach.tube_arrays(ldc, params, lo, hi, cfg.T, gamma, cfg.engine, cfg.split_depth)
    except DivergenceError:
        if B == 1:
            full = np.full((cfg.T + 1, B, d), np.inf)
            return -full, full
        parts = [region_tube(cfg, params, ldc, bound, lo[i : i + 1], hi[i : i + 1]) for i in range(B)]
        return np.concatenate([p[0] for p in parts], axis=1), np.concatenate([p[1] for p in parts], axis=1)
    if cfg.approach == TRAJECTORY:
        tl, tu = tl - bound.value, tu + bound.value
    bad = ~(np.all(np.isfinite(tl), axis=-1) & np.all(np.isfinite(tu), axis=-1))
    tl = np.where(bad[..., None], -np.inf, tl)
    tu = np.where(bad[..., None], np.inf, tu)
    return tl, tu


def _goal_check(cfg: VerifyConfig, tl, tu) -> np.ndarray:
    steps = reach.goal_steps(cfg.T, cfg.goal_mode, cfg.goal_k)
    inside = np.all(tl[steps] >= cfg.goal.lower, axis=-1) & np.all(tu[steps] <= cfg.goal.upper, axis=-1)
    # a non-finite enclosure at any step stands for the whole space and is never safe
    finite = np.all(np.isfinite(tl) & np.isfinite(tu), axis=(0, 2))
    return np.all(inside, axis=0) & finite


def _train_region(hdc, params, cfg: VerifyConfig, region: Box, depth: int, eps: float, lam: float):
    """Distil, calibrate and refine one calibration region; returns a list of results."""
    key = box_key(region)
    data = generate_dataset(hdc, params, region, cfg.n_init, cfg.T, derive_seed(cfg.seed, key, "data"))
    calib_seed = derive_seed(cfg.seed, key, "calibrate")
    train_seed = derive_seed(cfg.seed, key, "train") & 0xFFFFFFFF
    net, report, bound, hd_ok = None, None, None, False
    eps_halvings = lam_halvings = 0
    notes = []
    while True:
        tcfg = cfg.train.replace(eps=eps, lam=lam, seed=train_seed)
        try:
            net, report = train_ldc(data, tcfg, init=net)
        except TrainingError as exc:
            notes.append(f"training diverged: {exc}")
            net, report = train_ldc(data, tcfg.replace(max_epochs=0))
        bound, hd_ok = _discrepancy(cfg, net, hdc, params, region, calib_seed)
        if bound.value > cfg.xi:
            if eps_halvings < cfg.retry_budget:
                eps /= 2.0
                eps_halvings += 1
                continue
            if depth < cfg.max_rounds:
                out = []
                for child in region.split():
                    out += _train_region(hdc, params, cfg, child, depth + 1, eps, lam)
                return out
            notes.append("refinement budget exhausted with bound above xi")
            break
        tl, tu = region_tube(cfg, params, net, bound, region.lower, region.upper)
        reached = bool(_goal_check(cfg, tl, tu)[0])
        if not reached and hd_ok and lam_halvings < cfg.retry_budget:
            lam /= 2.0
            lam_halvings += 1
            continue
        break
    tl, tu = region_tube(cfg, params, net, bound, region.lower, region.upper)
    reached = bool(_goal_check(cfg, tl, tu)[0])
    cid = f"ldc-{zlib.crc32(key.encode()):08x}"
    return [RegionResult(region, net, bound, report, cid, depth, eps, lam, reached, notes)]


def iterative_training(hdc: HdcOracle, params: PlantParams, cfg: VerifyConfig, S0: Box) -> list[RegionResult]:
    """Distil and calibrate one LDC per region of the calibration grid, refining where needed."""
    regions = GridSpec(S0, cfg.region_widths).cells()
    jobs = (delayed(_train_region)(hdc, params, cfg, r, 0, cfg.eps, cfg.lam) for r in regions)
    nested = Parallel(n_jobs=cfg.workers)(jobs)
    return [r for group in nested for r in group]


def recalibrate(hdc: HdcOracle, params: PlantParams, cfg: VerifyConfig, results: list[RegionResult]) -> list[RegionResult]:
    """Same LDCs, bounds recomputed for ``cfg`` (e.g. the other approach); no retraining."""

    def one(r: RegionResult) -> RegionResult:
        seed = derive_seed(cfg.seed, box_key(r.region), "calibrate")
        bound, _ = _discrepancy(cfg, r.ldc, hdc, params, r.region, seed)
        tl, tu = region_tube(cfg, params, r.ldc, bound, r.region.lower, r.region.upper)
        return replace(r, bound=bound, goal_reached=bool(_goal_check(cfg, tl, tu)[0]), notes=list(r.notes))

    return list(Parallel(n_jobs=cfg.workers)(delayed(one)(r) for r in results))


@dataclass
class VerdictMap:
    lower: np.ndarray
    upper: np.ndarray
    verdict: np.ndarray
    gt: np.ndarray
    bound: np.ndarray
    controller: list
    notes: list

    def __len__(self) -> int:
        return self.verdict.shape[0]

    def with_ground_truth(self, labels) -> "VerdictMap":
        return replace(self, gt=np.asarray(labels, dtype=int))

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header.rstrip("\n") + "\n")
        d = self.lower.shape[1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell"] + [f"lo{j}" for j in range(d)] + [f"hi{j}" for j in range(d)] + ["verdict", "gt", "bound", "controller", "note"])
        for i in range(len(self)):
            w.writerow(
                [i]
                + [repr(float(v)) for v in self.lower[i]]
                + [repr(float(v)) for v in self.upper[i]]
                + [_LABELS[int(self.verdict[i])], _LABELS[int(self.gt[i])], repr(float(self.bound[i])), self.controller[i], self.notes[i]]
            )
        return buf.getvalue()


def end_to_end_verify(
    hdc: HdcOracle, params: PlantParams, cfg: VerifyConfig, grid: GridSpec, trained: list[RegionResult] | None = None
) -> VerdictMap:
    """Safe/unsafe verdict per verification cell.

    Each cell is cut by the calibration regions it overlaps; every piece is
    propagated with its own region's LDC and bound and the cell is safe iff
    every piece's inflated tube meets the goal.
    """
    if trained is None:
        trained = iterative_training(hdc, params, cfg, grid.S0)
    lo, hi = grid.bounds()
    n = lo.shape[0]
    safe = np.ones(n, dtype=bool)
    worst = np.zeros(n)
    ctrl = [[] for _ in range(n)]
    notes = [[] for _ in range(n)]
    covered = np.zeros(n, dtype=bool)
    for res in trained:
        plo = np.maximum(lo, res.region.lower)
        phi = np.minimum(hi, res.region.upper)
        overlap = np.all(plo < phi, axis=-1) | (np.all(plo <= phi, axis=-1) & np.all(lo == hi, axis=-1))
        idx = np.flatnonzero(overlap)
        if idx.size == 0:
            continue
        covered[idx] = True
        tl, tu = region_tube(cfg, params, res.ldc, res.bound, plo[idx], phi[idx])
        ok = _goal_check(cfg, tl, tu)
        safe[idx] &= ok
        worst[idx] = np.maximum(worst[idx], res.bound.value)
        for i in idx:
            ctrl[i].append(res.controller_id)
        if not res.bound.finite:
            for i in idx:
                notes[i].append("infinite bound")
    safe &= covered
    for i in np.flatnonzero(~covered):
        notes[i].append("no calibration region")
    verdict = np.where(safe, SAFE, UNSAFE)
    return VerdictMap(
        lo, hi, verdict, np.full(n, UNKNOWN), worst, ["+".join(c) for c in ctrl], ["; ".join(x) for x in notes]
    )


def ground_truth(
    hdc: HdcOracle,
    params: PlantParams,
    grid: GridSpec,
    samples_per_cell: int,
    T: int,
    goal: Box,
    seed: int = 0,
    mode: str = reach.FINAL,
    k: int | None = None,
    chunk: int = 4000,
) -> np.ndarray:
    """Per-cell labels: safe iff every sampled oracle rollout meets the goal; failures give unknown."""
    if samples_per_cell < 1:
        raise ContractViolation("samples_per_cell must be >= 1")
    lo, hi = grid.bounds()
    n = lo.shape[0]
    rng = np.random.default_rng(derive_seed(seed, "ground-truth", "gt"))
    u = rng.random((n, samples_per_cell, lo.shape[1]))
    s0 = (lo[:, None, :] + u * (hi - lo)[:, None, :]).reshape(-1, lo.shape[1])
    steps = reach.goal_steps(T, mode, k)
    ok = np.empty(s0.shape[0], dtype=bool)
    failed = np.zeros(s0.shape[0], dtype=bool)
    noise_seed = derive_seed(seed, "ground-truth", "test")
    for start in range(0, s0.shape[0], chunk):
        sl = slice(start, start + chunk)
        streams = np.arange(start, min(start + chunk, s0.shape[0]), dtype=np.uint64)
        try:
            states, _ = hdc_trajectory(hdc, s0[sl], T, noise_seed, streams, allow_failures=True)
        except (SimulationError, OracleError):
            failed[sl] = True
            ok[sl] = False
            continue
        finite = np.all(np.isfinite(states), axis=(0, 2))
        failed[sl] = ~finite
        ok[sl] = np.all(goal.contains(states[steps]), axis=0) & finite
    ok = ok.reshape(n, samples_per_cell)
    failed = failed.reshape(n, samples_per_cell)
    # one escaping sample decides; otherwise a failure leaves the cell unknown
    labels = np.where(np.all(ok, axis=1), SAFE, UNSAFE)
    escaped = np.any(~ok & ~failed, axis=1)
    labels = np.where(~escaped & np.any(failed, axis=1), UNKNOWN, labels)
    return labels


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float | None
    tnr: float | None
    precision: float | None
    f1: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(a: int, b: int) -> float | None:
    return a / b if b else None


def score(v: VerdictMap) -> Metrics:
    """Confusion counts and rates; ``None`` marks an undefined rate (zero denominator)."""
    labelled = v.gt != UNKNOWN
    if not np.any(labelled):
        raise ContractViolation("no cell has a ground-truth label")
    pred = v.verdict[labelled] == SAFE
    truth = v.gt[labelled] == SAFE
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tpr = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    f1 = None
    if tpr is not None and prec is not None:
        f1 = 2 * prec * tpr / (prec + tpr) if prec + tpr > 0 else None
    return Metrics(tp, fp, tn, fn, tpr, _ratio(tn, tn + fp), prec, f1)


def metrics_json(m: Metrics, extra: dict | None = None) -> str:
    doc = {"metrics": m.to_dict()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def region_map_svg(v: VerdictMap, dims: tuple = (0, 1), size: int = 480) -> str:
    """Static map of the first two dimensions: green safe, red unsafe, hatched where GT is unsafe."""
    a, b = dims
    x0, x1 = v.lower[:, a].min(), v.upper[:, a].max()
    y0, y1 = v.lower[:, b].min(), v.upper[:, b].max()
    sx = size / max(x1 - x0, 1e-12)
    sy = size / max(y1 - y0, 1e-12)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<defs><pattern id="gt" width="6" height="6" patternUnits="userSpaceOnUse">'
        '<path d="M0,6 L6,0" stroke="black" stroke-width="0.8"/></pattern></defs>',
    ]
    for i in range(len(v)):
        x = (v.lower[i, a] - x0) * sx
        y = (y1 - v.upper[i, b]) * sy
        w = (v.upper[i, a] - v.lower[i, a]) * sx
        h = (v.upper[i, b] - v.lower[i, b]) * sy
        color = "#2e9b46" if v.verdict[i] == SAFE else "#c8332f"
        rect = f'x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}"'
        parts.append(f'<rect {rect} fill="{color}" stroke="white" stroke-width="0.3"/>')
        if v.gt[i] == UNSAFE:
            parts.append(f'<rect {rect} fill="url(#gt)"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
