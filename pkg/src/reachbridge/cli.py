"""Batch command-line front end: ``reachbridge <command> --config <path>``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, conformal, controllers, highdim, reach
from . import config as config_mod
from .dynamics import Box
from .errors import ConfigError, ContractViolation, NumericOverflowError, OracleError, ParseError, SimulationError, TrainingError
from .verify import (
    SAFE,
    UNKNOWN,
    UNSAFE,
    VerdictMap,
    end_to_end_verify,
    ground_truth,
    iterative_training,
    metrics_json,
    region_map_svg,
    score,
)

COMMANDS = ("distill", "discrepancy", "reach", "verify", "gt", "report")
_LABEL_CODES = {"safe": SAFE, "unsafe": UNSAFE, "unknown": UNKNOWN}

EXIT_OK, EXIT_INFRA, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reachbridge", description="Statistical reachability verification of image-based controllers.")
    parser.add_argument("--version", action="version", version=f"reachbridge {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file or preset:IP|MC|CP")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--workers", type=int, help="worker processes (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--approach", choices=("action", "trajectory"), help="approach (overrides the config)")
    parser.add_argument("--frames", type=int, default=0, help="also write this many .pgm debug frames (distill)")
    return parser


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _with_header(header: str, text: str) -> str:
    return header + "\n" + text


def _read_table(path: Path) -> list[dict]:
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise ConfigError("out", f"missing input artifact {path}") from exc
    body = [ln for ln in lines if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def _bound_rows(results):
    return [(r.controller_id, r.bound) for r in results]


def cmd_distill(cfg: config_mod.RunConfig, args) -> list[Path]:
    results = iterative_training(cfg.oracle, cfg.params, cfg.verify, cfg.S0)
    out = cfg.out
    written = []
    index = []
    for r in results:
        model = out / "models" / f"{r.controller_id}.ldc.json"
        model.parent.mkdir(parents=True, exist_ok=True)
        controllers.save(r.ldc, model, header=cfg.header())
        written.append(model)
        report = json.loads(r.report.to_json()) if r.report is not None else {}
        report.update(controller=r.controller_id, region=r.region.to_list(), notes=r.notes, bound=r.bound.value)
        written.append(_write(out / "models" / f"{r.controller_id}.report.json", _with_header(cfg.header(), json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")))
        index.append({"controller": r.controller_id, "region": r.region.to_list(), "model": model.name})
    written.append(_write(out / "models" / "index.json", _with_header(cfg.header(), json.dumps(index, indent=2, default=str) + "\n")))
    written.append(_write(out / "bounds.csv", conformal.bounds_csv(_bound_rows(results), cfg.header())))
    for i in range(args.frames):
        s = cfg.S0.sample(np.random.default_rng(cfg.seed + i), 1)[0]
        path = out / "frames" / f"frame{i:03d}.pgm"
        path.parent.mkdir(parents=True, exist_ok=True)
        highdim.write_pgm(path, highdim.render(cfg.params, s), comment=cfg.header()[2:])
        written.append(path)
    return written


def _load_models(cfg: config_mod.RunConfig):
    """Previously distilled models from ``out/models`` as ``(controller_id, region, net)``."""
    index_path = cfg.out / "models" / "index.json"
    try:
        text = index_path.read_text()
    except FileNotFoundError as exc:
        raise ConfigError("out", f"no distilled models under {index_path.parent}; run `distill` first") from exc
    index = json.loads("\n".join(ln for ln in text.splitlines() if not ln.startswith("#")))
    out = []
    for entry in index:
        region = Box.from_intervals([(lo, hi) for lo, hi in entry["region"]])
        out.append((entry["controller"], region, controllers.load(cfg.out / "models" / entry["model"])))
    return out


def _calibrate(cfg, region, net):
    from .verify import _discrepancy, box_key, derive_seed

    seed = derive_seed(cfg.seed, box_key(region), "calibrate")
    bound, _ = _discrepancy(cfg.verify, net, cfg.oracle, cfg.params, region, seed)
    return bound


def cmd_discrepancy(cfg: config_mod.RunConfig, args) -> list[Path]:
    rows = [(cid, _calibrate(cfg, region, net)) for cid, region, net in _load_models(cfg)]
    return [_write(cfg.out / "bounds.csv", conformal.bounds_csv(rows, cfg.header()))]


def cmd_reach(cfg: config_mod.RunConfig, args) -> list[Path]:
    models = _load_models(cfg)
    target = cfg.document.get("reach_region")
    if target is None:
        cid, region, net = models[0]
    else:
        box = Box.from_intervals([tuple(p) for p in target])
        matches = [m for m in models if np.all(m[1].lower <= box.lower) and np.all(box.upper <= m[1].upper)]
        if not matches:
            raise ConfigError("reach_region", "not contained in any distilled calibration region")
        cid, _, net = matches[0]
        region = box
    bound = _calibrate(cfg, region, net)
    v = cfg.verify
    if v.approach == "action":
        tube = reach.reach_tube_action_inflated(net, cfg.params, region, v.T, bound, v.engine, v.split_depth)
    else:
        tube = reach.inflate_tube_trajectory(reach.reach_tube_ldc(net, cfg.params, region, v.T, v.engine, v.split_depth), bound)
    header = f"{cfg.header()} controller={cid} bound={bound.value!r}"
    return [_write(cfg.out / "tube.csv", reach.tube_csv(tube, header))]


def _labels(cfg: config_mod.RunConfig) -> np.ndarray:
    v = cfg.verify
    return ground_truth(cfg.oracle, cfg.params, cfg.cell_grid, cfg.gt_samples, v.T, v.goal, cfg.seed, v.goal_mode, v.goal_k)


def _labels_csv(cfg, labels) -> str:
    lo, hi = cfg.cell_grid.bounds()
    d = lo.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell"] + [f"lo{j}" for j in range(d)] + [f"hi{j}" for j in range(d)] + ["gt"])
    names = {SAFE: "safe", UNSAFE: "unsafe", UNKNOWN: "unknown"}
    for i, lab in enumerate(labels):
        w.writerow([i] + [repr(float(x)) for x in lo[i]] + [repr(float(x)) for x in hi[i]] + [names[int(lab)]])
    return _with_header(cfg.header(), buf.getvalue())


def cmd_gt(cfg: config_mod.RunConfig, args) -> list[Path]:
    return [_write(cfg.out / "labels.csv", _labels_csv(cfg, _labels(cfg)))]


def _summary(vm: VerdictMap) -> dict:
    return {
        "cells": len(vm),
        "safe_verdicts": int(np.sum(vm.verdict == SAFE)),
        "unsafe_verdicts": int(np.sum(vm.verdict == UNSAFE)),
    }


def _metrics_doc(cfg, vm: VerdictMap) -> str:
    extra = {"summary": _summary(vm), "version": __version__, "config": cfg.config_hash(), "seed": cfg.seed}
    if np.any(vm.gt != UNKNOWN):
        return metrics_json(score(vm), extra) + "\n"
    extra["metrics"] = None
    extra["note"] = "no ground-truth labels; run `gt` then `report`"
    return json.dumps(extra, indent=2, sort_keys=True) + "\n"


def cmd_verify(cfg: config_mod.RunConfig, args) -> list[Path]:
    vm = end_to_end_verify(cfg.oracle, cfg.params, cfg.verify, cfg.cell_grid)
    labels_path = cfg.out / "labels.csv"
    if labels_path.exists():
        vm = vm.with_ground_truth(_labels_from_rows(_read_table(labels_path), len(vm)))
    return [
        _write(cfg.out / "verdicts.csv", vm.to_csv(cfg.header())),
        _write(cfg.out / "metrics.json", _metrics_doc(cfg, vm)),
    ]


def _labels_from_rows(rows, n) -> np.ndarray:
    if len(rows) != n:
        raise ConfigError("out", f"label file has {len(rows)} cells but the grid has {n}")
    return np.array([_LABEL_CODES[r["gt"]] for r in rows], dtype=int)


def cmd_report(cfg: config_mod.RunConfig, args) -> list[Path]:
    rows = _read_table(cfg.out / "verdicts.csv")
    labels = _labels_from_rows(_read_table(cfg.out / "labels.csv"), len(rows))
    if not rows:
        raise ConfigError("out", "empty verdict file")
    d = sum(1 for k in rows[0] if k.startswith("lo"))
    vm = VerdictMap(
        np.array([[float(r[f"lo{j}"]) for j in range(d)] for r in rows]),
        np.array([[float(r[f"hi{j}"]) for j in range(d)] for r in rows]),
        np.array([_LABEL_CODES[r["verdict"]] for r in rows], dtype=int),
        labels,
        np.array([float(r["bound"]) for r in rows]),
        [r["controller"] for r in rows],
        [r["note"] for r in rows],
    )
    svg = region_map_svg(vm)
    svg = svg.replace(">", f">\n<!-- {cfg.header()[2:]} -->", 1)
    return [
        _write(cfg.out / "metrics.json", _metrics_doc(cfg, vm)),
        _write(cfg.out / "verdicts.csv", vm.to_csv(cfg.header())),
        _write(cfg.out / "map.svg", svg),
    ]


_HANDLERS = {
    "distill": cmd_distill,
    "discrepancy": cmd_discrepancy,
    "reach": cmd_reach,
    "verify": cmd_verify,
    "gt": cmd_gt,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("seed", "workers", "out", "approach") if getattr(args, k) is not None}
    try:
        cfg = config_mod.load(args.config, overrides)
    except ConfigError as exc:
        print(f"reachbridge: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        written = _HANDLERS[args.command](cfg, args)
    except (ConfigError, ParseError) as exc:
        print(f"reachbridge: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, OracleError, TrainingError, NumericOverflowError, ContractViolation, OSError) as exc:
        print(f"reachbridge: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_INFRA
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
