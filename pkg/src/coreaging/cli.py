"""Command-line entry point: calibrate, gen-trace, simulate and report.

Exit codes: 0 on success, 1 for invalid input (config, trace, arguments),
2 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .aging import SECONDS_PER_YEAR, AgingError, worst_case_drop
from .baselines import load_weights_csv
from .config import ConfigError, ExperimentConfig
from .engine import run_simulation
from .metrics import (
    CarbonParams,
    MetricError,
    NoAgingError,
    SampleSeries,
    estimate_yearly_embodied,
    frequency_cv,
    mean_degradation,
    normalized_idle_series,
    oversubscription_integral,
    percentiles,
)
from .workload import Request, TraceParseError, generate_synthetic_trace, parse_trace, write_trace

log = logging.getLogger("coreaging")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
IDLE_FLOOR = -0.10
CARBON_PERCENTILES = (50, 99)


class ValidationError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.load(path)


# -- calibrate -------------------------------------------------------------
def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    params = cfg.aging_params()
    cal = cfg.raw["aging"]["calibration"]
    drop = worst_case_drop(params, cal["lifetime_years"] * SECONDS_PER_YEAR)
    out = Path(args.out) if args.out else Path("params.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(
        {
            "config_hash": cfg.digest(),
            "params": params.to_dict(),
            "verification": {
                "lifetime_years": cal["lifetime_years"],
                "target_drop": cal["target_drop"],
                "drop": drop,
            },
        },
        out,
    )
    print(f"k_fit={params.k_fit!r} drop@{cal['lifetime_years']:g}y={drop:.9f} -> {out}")
    return EXIT_OK


# -- gen-trace -------------------------------------------------------------
def cmd_gen_trace(args) -> int:
    cfg = _load_config(args.config)
    rate = args.rate if args.rate is not None else cfg.rates[0]
    if rate <= 0:
        raise ValidationError("rate must be positive")
    duration = args.duration if args.duration is not None else cfg.raw["workload"]["duration_s"]
    seed = cfg.seeds[0] + args.seed_offset
    inp, outp = cfg.token_distributions()
    trace = generate_synthetic_trace(rate, duration, inp, outp, seed)
    out = Path(args.out) if args.out else Path("trace.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        write_trace(trace, fh)
    print(f"{len(trace)} requests -> {out}")
    return EXIT_OK


# -- simulate --------------------------------------------------------------
def cell_name(policy: str, rate_label: str, seed: int) -> str:
    return f"{policy}__rate-{rate_label}__seed-{seed}"


def _rate_label(rate: Optional[float]) -> str:
    return "trace" if rate is None else f"{rate:g}"


def _load_trace_file(cfg: ExperimentConfig) -> List[Request]:
    path = cfg.resolve(cfg.raw["workload"]["trace_file"])
    try:
        with open(path, newline="") as fh:
            return parse_trace(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read trace file {path}: {exc}") from exc
    except TraceParseError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _check_inputs(cfg: ExperimentConfig) -> None:
    weights = cfg.raw["policy"]["linux_weights_csv"]
    if weights and "linux" in cfg.policies:
        path = cfg.resolve(weights)
        try:
            with open(path, newline="") as fh:
                load_weights_csv(fh, cfg.cores_per_vm)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"linux weights {path}: {exc}") from exc


def run_cell(
    raw: dict,
    base_dir: str,
    policy: str,
    rate: Optional[float],
    seed: int,
    trace: Optional[List[Request]],
    out_dir: str,
) -> str:
    """Run one (policy, rate, seed) cell and write its artifacts."""
    cfg = ExperimentConfig(raw, Path(base_dir))
    w = cfg.raw["workload"]
    if trace is None:
        inp, outp = cfg.token_distributions()
        trace = generate_synthetic_trace(rate, w["duration_s"], inp, outp, seed)
        horizon = cfg.raw["horizon_s"] if cfg.raw["horizon_s"] is not None else w["duration_s"]
    else:
        horizon = cfg.raw["horizon_s"]
    result = run_simulation(cfg, trace, seed, policy, horizon=horizon)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "final_cores.csv", "w", newline="") as fh:
        result.write_final_cores_csv(fh)
    with open(d / "metric_samples.csv", "w", newline="") as fh:
        result.samples.write_csv(fh)
    if result.events.enabled:
        with open(d / "event_log.csv", "w", newline="") as fh:
            result.events.write_csv(fh)
    if cfg.raw["policy"]["debug_idling"] and policy == "proposed":
        with open(d / "idling.csv", "w", newline="") as fh:
            result.write_idling_csv(fh)
    _dump_json(
        {
            "config_hash": cfg.digest(),
            "version": __version__,
            "policy": policy,
            "rate": rate,
            "seed": seed,
            "requests": len(trace),
            "tasks": result.task_count,
            "end_time": result.end_time,
            "machines": cfg.machines,
            "cores_per_vm": cfg.cores_per_vm,
            "nominal_frequency": cfg.nominal_frequency,
        },
        d / "run.json",
    )
    return d.name


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    out_root = Path(args.out or cfg.resolve(cfg.raw["output"]["dir"]))
    # resolve parameters and every input file before any cell runs
    cfg.aging_params()
    _check_inputs(cfg)
    file_trace = None
    if cfg.raw["workload"]["source"] == "file":
        file_trace = _load_trace_file(cfg)
        rates: Sequence[Optional[float]] = [None]
    else:
        rates = cfg.rates
    seeds = [s + args.seed_offset for s in cfg.seeds]
    cells = [(p, r, s) for r in rates for s in seeds for p in cfg.policies]
    out_root.mkdir(parents=True, exist_ok=True)
    _dump_json(json.loads(cfg.to_json()), out_root / "config.json")

    def submit(fn, p, r, s):
        name = cell_name(p, _rate_label(r), s)
        return name, fn(run_cell, cfg.raw, str(cfg.base_dir), p, r, s, file_trace, str(out_root / name))

    failures = []
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [submit(pool.submit, p, r, s) for p, r, s in cells]
            for name, fut in futures:
                try:
                    fut.result()
                    print(f"done {name}")
                except Exception as exc:  # report every failed cell
                    failures.append((name, exc))
    else:
        for p, r, s in cells:
            name = cell_name(p, _rate_label(r), s)
            try:
                run_cell(cfg.raw, str(cfg.base_dir), p, r, s, file_trace, str(out_root / name))
                print(f"done {name}")
            except Exception as exc:
                failures.append((name, exc))
                break
    for name, exc in failures:
        print(f"error: cell {name} failed: {exc}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


# -- report ----------------------------------------------------------------
def _read_final_cores(path: Path) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    per: Dict[int, Tuple[list, list]] = defaultdict(lambda: ([], []))
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            f0s, fs = per[int(row["machine"])]
            f0s.append(float(row["f0"]))
            fs.append(float(row["frequency"]))
    return {m: (np.array(a), np.array(b)) for m, (a, b) in sorted(per.items())}


def load_run(d: Path) -> dict:
    meta = json.loads((d / "run.json").read_text())
    cores = _read_final_cores(d / "final_cores.csv")
    with open(d / "metric_samples.csv", newline="") as fh:
        samples = SampleSeries.read_csv(fh)
    cvs = [frequency_cv(f) for _, f in cores.values()]
    degs = [mean_degradation(f0, f) for f0, f in cores.values()]
    idle_values, idle = normalized_idle_series(samples)
    oversub = sum(oversubscription_integral(samples, m, end=meta["end_time"]) for m in cores)
    return {
        "name": d.name,
        "meta": meta,
        "cv": cvs,
        "degradation": degs,
        "idle_values": idle_values,
        "idle": idle,
        "oversub_task_seconds": oversub,
    }


def _write_percentile_csv(path: Path, table: Dict[str, Dict[str, float]], rows: Sequence[str]) -> None:
    policies = sorted(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["percentile"] + policies)
        for r in rows:
            w.writerow([r] + [repr(table[p].get(r, float("nan"))) for p in policies])


def carbon_table(deg_pct: Dict[str, Dict[str, float]], params: CarbonParams) -> List[dict]:
    """Yearly embodied carbon per policy and percentile, relative to linux."""
    rows = []
    linux = deg_pct.get("linux")
    for policy in sorted(deg_pct):
        for q in CARBON_PERCENTILES:
            key = f"p{q}"
            row = {"policy": policy, "percentile": key, "degradation": deg_pct[policy].get(key)}
            if linux is None:
                row.update(ratio=None, lifetime_years=None, yearly_kgco2eq=None, reduction=None,
                           note="no linux runs to compare against")
            else:
                try:
                    yearly, red = estimate_yearly_embodied(deg_pct[policy][key], linux[key], params)
                    ratio = deg_pct[policy][key] / linux[key]
                    row.update(ratio=ratio, lifetime_years=params.base_lifetime / ratio,
                               yearly_kgco2eq=yearly, reduction=red, note="")
                except NoAgingError:
                    row.update(ratio=None, lifetime_years=None, yearly_kgco2eq=None, reduction=None,
                               note="no measurable aging")
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise ValidationError(f"{runs_dir} is not a directory")
    run_dirs = sorted(p for p in runs_dir.iterdir() if (p / "run.json").is_file())
    if not run_dirs:
        raise ValidationError(f"no completed runs under {runs_dir}")
    runs = [load_run(d) for d in run_dirs]
    out = Path(args.out) if args.out else runs_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    by_policy: Dict[str, List[dict]] = defaultdict(list)
    for r in runs:
        by_policy[r["meta"]["policy"]].append(r)

    cv_pct, deg_pct, idle_pct = {}, {}, {}
    policies = {}
    for policy, rs in sorted(by_policy.items()):
        cvs = [x for r in rs for x in r["cv"]]
        degs = [x for r in rs for x in r["degradation"]]
        pooled = np.concatenate([r["idle_values"] for r in rs])
        cv_pct[policy] = percentiles(cvs)
        deg_pct[policy] = percentiles(degs)
        idle_pct[policy] = dict(percentiles(pooled, (1, 50, 90)), min=float(pooled.min()))
        policies[policy] = {
            "runs": len(rs),
            "frequency_cv": cv_pct[policy],
            "mean_degradation": dict(deg_pct[policy], mean=float(np.mean(degs))),
            "normalized_idle": idle_pct[policy],
            "oversub_task_seconds": float(sum(r["oversub_task_seconds"] for r in rs)),
        }
        if policy == "proposed":
            policies[policy]["min_normalized_idle_ok"] = bool(idle_pct[policy]["min"] >= IDLE_FLOOR)

    machines = runs[0]["meta"]["machines"]
    carbon = carbon_table(deg_pct, CarbonParams(machines=machines))

    _write_percentile_csv(out / "frequency_cv.csv", cv_pct, ["p1", "p50", "p90", "p99"])
    _write_percentile_csv(out / "mean_degradation.csv", deg_pct, ["p1", "p50", "p90", "p99"])
    _write_percentile_csv(out / "normalized_idle.csv", idle_pct, ["p1", "p50", "p90", "min"])
    fields = ["policy", "percentile", "degradation", "ratio", "lifetime_years", "yearly_kgco2eq", "reduction", "note"]
    with open(out / "carbon.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in carbon:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})

    cells = [
        {
            "name": r["name"],
            "policy": r["meta"]["policy"],
            "rate": r["meta"]["rate"],
            "seed": r["meta"]["seed"],
            "min_normalized_idle": r["idle"].get("min"),
            "min_normalized_idle_ok": bool(r["idle"].get("min", 1.0) >= IDLE_FLOOR),
        }
        for r in runs
    ]
    summary = {
        "config_hashes": sorted({r["meta"]["config_hash"] for r in runs}),
        "baseline_yearly_kgco2eq": CarbonParams(machines=machines).baseline_yearly,
        "policies": policies,
        "carbon": carbon,
        "cells": cells,
    }
    _dump_json(summary, out / "summary.json")
    print(f"report for {len(runs)} runs -> {out}")
    if "proposed" in policies:
        ok = policies["proposed"]["min_normalized_idle_ok"]
        print(f"proposed min normalized idle {idle_pct['proposed']['min']:.4f} (>= {IDLE_FLOOR}: {ok})")
    return EXIT_OK


# -- entry point -----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coreaging",
        description="Simulate CPU core aging under idle-state-aware task placement.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="solve the aging fitting constant and write params JSON")
    p.add_argument("--config")
    p.add_argument("--out", help="params JSON path (default params.json)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-trace", help="write a synthetic request trace CSV")
    p.add_argument("--config")
    p.add_argument("--out", help="trace CSV path (default trace.csv)")
    p.add_argument("--rate", type=float, help="requests per second (default: first configured rate)")
    p.add_argument("--duration", type=float, help="seconds (default: workload.duration_s)")
    p.add_argument("--seed-offset", type=int, default=0)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", help="run the policy x rate x seed matrix")
    p.add_argument("--config")
    p.add_argument("--out", help="artifact directory (default: output.dir from the config)")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="aggregate run artifacts into metric CSVs and a JSON summary")
    p.add_argument("runs", help="artifact directory written by simulate")
    p.add_argument("--out", help="report directory (default: <runs>/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "parallel", 1) < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ValidationError, ConfigError, AgingError, TraceParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MetricError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
