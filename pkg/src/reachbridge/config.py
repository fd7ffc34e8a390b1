"""Run configuration: JSON schema, benchmark presets and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, conformal, reach
from .distill import TrainConfig
from .dynamics import BENCHMARKS, Box, PlantParams
from .errors import ConfigError, ContractViolation
from .highdim import HdcOracle, NOISE_PRESETS, identity_oracle, surrogate_oracle
from .verify import APPROACHES, GridSpec, VerifyConfig

# Scenario literals (initial set, horizon, goal) come from the benchmark descriptions;
# everything else is a desk-scale default.
_COMMON = {
    "constants": {},
    "gravity": None,
    "u_min": None,
    "u_max": None,
    "oracle": {"kind": "surrogate", "sigma": None},
    "goal_mode": reach.FINAL,
    "goal_k": None,
    "approach": "action",
    "alpha": 0.05,
    "N": 60,
    "max_rounds": 1,
    "retry_budget": 2,
    "gt_samples": 10,
    "n_init": 60,
    "engine": "affine",
    "split_depth": 0,
    "pairing": conformal.TEACHER_STATES,
    "reach_region": None,
    "seed": 0,
    "workers": 1,
    "out": "out",
}

PRESETS = {
    "IP": {
        "benchmark": "IP",
        "S0": [[0.0, 2.0], [-2.0, 0.0]],
        "goal": [[0.0, 0.35], [None, None]],
        "T": 30,
        "xi": {"action": 0.0015, "trajectory": 0.1},
        "max_rounds": 0,
        "retry_budget": 0,
        "eps": 1e-6,
        "lam": 50.0,
        "region_width": [0.25, 0.25],
        "cell_width": [0.05, 0.05],
        "train": {"learning_rate": 0.003, "max_epochs": 300, "batch_size": 64},
    },
    "MC": {
        "benchmark": "MC",
        "S0": [[-0.6, -0.4], [-0.02, 0.05]],
        "goal": [[0.45, None], [None, None]],
        "T": 60,
        "xi": {"action": 0.05, "trajectory": 0.1},
        "eps": 1e-4,
        "lam": 50.0,
        "region_width": [0.025, 0.00875],
        "cell_width": [0.005, 0.00175],
        "train": {"learning_rate": 0.003, "max_epochs": 300, "batch_size": 64},
    },
    "CP": {
        "benchmark": "CP",
        "S0": [[0.0, 0.1], [0.0, 0.1], [0.05, 0.15], [-0.4, -0.35]],
        "goal": [[0.0, 0.2], [None, None], [-0.2, 0.2], [None, None]],
        "T": 20,
        "xi": {"action": 0.05, "trajectory": 0.1},
        "eps": 1e-4,
        "lam": 500.0,
        "region_width": [0.05, 0.05, 0.05, 0.025],
        "cell_width": [0.05, 0.05, 0.05, 0.025],
        "train": {"learning_rate": 0.003, "max_epochs": 300, "batch_size": 64},
    },
}

_TRAIN_KEYS = {"learning_rate", "max_epochs", "batch_size", "hidden", "activations", "output_activation", "check_every"}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    doc = copy.deepcopy(_COMMON)
    doc.update(copy.deepcopy(PRESETS[name]))
    return doc


def load_document(source: str | Path) -> dict:
    """Read a JSON config; ``preset:NAME`` or a file with a ``"preset"`` key starts from a preset."""
    text = str(source)
    if text.startswith("preset:"):
        return preset(text.split(":", 1)[1])
    path = Path(text)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return merge(preset(raw.pop("preset")) if "preset" in raw else copy.deepcopy(_COMMON), raw)


def merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("constants",):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _box(doc, name: str, d: int, bounded: bool) -> Box:
    value = doc.get(name)
    if not isinstance(value, list) or len(value) != d or any(not isinstance(p, list) or len(p) != 2 for p in value):
        raise ConfigError(name, f"expected {d} [lo, hi] pairs")
    lo = [(-np.inf if p[0] is None else p[0]) for p in value]
    hi = [(np.inf if p[1] is None else p[1]) for p in value]
    try:
        box = Box(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    except (TypeError, ValueError, ContractViolation) as exc:
        raise ConfigError(name, str(exc)) from exc
    if bounded and not (np.all(np.isfinite(box.lower)) and np.all(np.isfinite(box.upper))):
        raise ConfigError(name, "must be bounded")
    return box


def _number(doc, name, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    value = doc.get(name)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not float(value).is_integer()):
        raise ConfigError(name, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
    value = int(value) if integer else float(value)
    if not np.isfinite(value):
        raise ConfigError(name, "must be finite")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ConfigError(name, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and (value > hi or (hi_open and value == hi)):
        raise ConfigError(name, f"must be {'<' if hi_open else '<='} {hi}, got {value}")
    return value


def _widths(doc, name, d):
    value = doc.get(name)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value] * d
    if not isinstance(value, list) or len(value) != d:
        raise ConfigError(name, f"expected {d} widths")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0 or not np.isfinite(v) for v in value):
        raise ConfigError(name, "widths must be finite and > 0")
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class RunConfig:
    document: dict
    params: PlantParams
    oracle: HdcOracle
    S0: Box
    verify: VerifyConfig
    region_grid: GridSpec
    cell_grid: GridSpec
    gt_samples: int
    out: Path

    @property
    def seed(self) -> int:
        return self.verify.seed

    def config_hash(self) -> str:
        return document_hash(self.document)

    def header(self) -> str:
        return f"# reachbridge {__version__} config={self.config_hash()} seed={self.seed}"

    def with_approach(self, approach: str) -> "RunConfig":
        doc = dict(self.document, approach=approach)
        return build(doc)


# fields that do not affect results stay out of the provenance hash
_UNHASHED = ("out", "workers")


def document_hash(doc: dict) -> str:
    doc = {k: v for k, v in doc.items() if k not in _UNHASHED}
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build(doc: dict) -> RunConfig:
    """Validate a configuration document and assemble the run objects."""
    doc = copy.deepcopy(doc)
    bench = doc.get("benchmark")
    if bench not in BENCHMARKS:
        raise ConfigError("benchmark", f"expected one of {BENCHMARKS}, got {bench!r}")
    consts = doc.get("constants") or {}
    if not isinstance(consts, dict):
        raise ConfigError("constants", "expected an object")
    try:
        params = PlantParams(bench, consts, doc.get("gravity"), doc.get("u_min"), doc.get("u_max"))
    except (ContractViolation, TypeError, ValueError) as exc:
        raise ConfigError("constants", str(exc)) from exc
    d = params.state_dim

    oracle_doc = doc.get("oracle") or {}
    kind = oracle_doc.get("kind", "surrogate")
    sigma = oracle_doc.get("sigma")
    if isinstance(sigma, str):
        if sigma not in NOISE_PRESETS[bench]:
            raise ConfigError("oracle.sigma", f"unknown noise level {sigma!r}")
        sigma = NOISE_PRESETS[bench][sigma]
    if sigma is None:
        sigma = [0.0] * d
    if isinstance(sigma, (int, float)) and not isinstance(sigma, bool):
        sigma = [float(sigma)] * d
    if not isinstance(sigma, (list, tuple)) or len(sigma) != d or any(not isinstance(v, (int, float)) or v < 0 for v in sigma):
        raise ConfigError("oracle.sigma", f"expected {d} non-negative standard deviations")
    sigma = tuple(float(v) for v in sigma)
    if kind == "surrogate":
        oracle = surrogate_oracle(params, sigma)
    elif kind == "identity":
        oracle = identity_oracle(params, sigma=sigma)
    else:
        raise ConfigError("oracle.kind", f"expected 'surrogate' or 'identity', got {kind!r}")

    S0 = _box(doc, "S0", d, bounded=True)
    goal = _box(doc, "goal", d, bounded=False)
    T = _number(doc, "T", lo=0, integer=True)
    approach = doc.get("approach")
    if approach not in APPROACHES:
        raise ConfigError("approach", f"expected one of {APPROACHES}, got {approach!r}")
    alpha = _number(doc, "alpha", 0.0, 1.0, lo_open=True, hi_open=True)
    N = _number(doc, "N", lo=1, integer=True)
    xi_doc = doc.get("xi")
    xi_val = xi_doc.get(approach) if isinstance(xi_doc, dict) else xi_doc
    xi = _number({"xi": xi_val}, "xi", lo=0.0, lo_open=True) if xi_val is not None else None
    if xi is None:
        raise ConfigError("xi", f"no threshold for the {approach} approach")
    eps = _number(doc, "eps", lo=0.0, lo_open=True)
    lam = _number(doc, "lam", lo=0.0, lo_open=True)
    max_rounds = _number(doc, "max_rounds", lo=0, integer=True)
    retry = _number(doc, "retry_budget", lo=0, integer=True)
    gt_samples = _number(doc, "gt_samples", lo=1, integer=True)
    n_init = _number(doc, "n_init", lo=1, integer=True)
    split_depth = _number(doc, "split_depth", lo=0, hi=4, integer=True)
    seed = _number(doc, "seed", lo=0, hi=2**64 - 1, integer=True)
    workers = _number(doc, "workers", lo=-1, integer=True)
    if workers == 0:
        raise ConfigError("workers", "must be a positive count or -1 for all cores")
    engine = doc.get("engine")
    if engine not in reach.ENGINES:
        raise ConfigError("engine", f"expected one of {reach.ENGINES}")
    pairing = doc.get("pairing")
    if pairing not in (conformal.PAIRED, conformal.TEACHER_STATES):
        raise ConfigError("pairing", "expected 'paired' or 'teacher-states'")
    goal_mode = doc.get("goal_mode")
    goal_k = doc.get("goal_k")
    try:
        reach.goal_steps(T, goal_mode, goal_k)
    except ContractViolation as exc:
        raise ConfigError("goal_mode", str(exc)) from exc

    train_doc = doc.get("train") or {}
    unknown = set(train_doc) - _TRAIN_KEYS
    if unknown:
        raise ConfigError("train", f"unknown keys {sorted(unknown)}")
    try:
        train = TrainConfig(
            eps=eps, lam=lam, output_scale=max(abs(params.u_min), abs(params.u_max)), seed=0, **train_doc
        )
    except (ContractViolation, TypeError) as exc:
        raise ConfigError("train", str(exc)) from exc

    region_w = _widths(doc, "region_width", d)
    cell_w = _widths(doc, "cell_width", d)
    try:
        vcfg = VerifyConfig(
            approach=approach, alpha=alpha, N=N, T=T, goal=goal, goal_mode=goal_mode, goal_k=goal_k, xi=xi,
            eps=eps, lam=lam, max_rounds=max_rounds, retry_budget=retry, region_widths=region_w, n_init=n_init,
            train=train, engine=engine, split_depth=split_depth, pairing=pairing, seed=seed, workers=workers,
        )
    except ContractViolation as exc:
        raise ConfigError("verify", str(exc)) from exc
    out = doc.get("out") or "out"
    return RunConfig(doc, params, oracle, S0, vcfg, GridSpec(S0, region_w), GridSpec(S0, cell_w), gt_samples, Path(out))


def load(source, overrides: dict | None = None) -> RunConfig:
    doc = load_document(source)
    if overrides:
        doc = merge(doc, overrides)
    return build(doc)
