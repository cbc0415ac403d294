"""Command-line entry point: ``fastslow simulate | metrics | ablation | bench``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from .config import ConfigError, config_to_toml, load_config
from .metrics import (ABLATION_CONFIGS, MetricsError, MetricTable, lateral_percentiles,
                      percentiles_csv, read_run_log, split_lateral_medians, summary_dict,
                      summary_json, write_run_log, fmt)
from .path import PathError
from .sim import ScenarioError, bundled_scenarios, load_scenario, run_scenario

OUT_ENV = "FASTSLOW_OUT_DIR"
DEFAULT_OUT = "runs"
ABLATION_FORMAT = "fastslow-ablation v1"
META_FILE = "scenario.json"

log = logging.getLogger("fastslow")


def default_out_dir() -> FsPath:
    return FsPath(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _write(path: FsPath, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_tables(run_dir: FsPath, logs, meta: dict) -> MetricTable:
    """Metric tables computed from the logs as persisted (read back from disk)."""
    logs = [read_run_log(run_dir / f"{lg.run_id}.csv") for lg in logs]
    table = MetricTable.from_logs(logs, meta["horizon"], meta["dt"])
    _write(run_dir / "metrics.csv", table.to_csv())
    vs = np.asarray(meta["vertex_s"], dtype=float)
    _write(run_dir / "lateral_percentiles.csv", percentiles_csv(vs, lateral_percentiles(logs, vs)))
    _write(run_dir / "summary.json", summary_json(summary_dict(
        meta["scenario"], meta["seed"], meta["fast_adaptation"], meta["long_term"], table)))
    return table


def simulate(scenario, run_dir: FsPath, quiet: bool = False):
    run_dir.mkdir(parents=True, exist_ok=True)
    for old in run_dir.glob("*.csv"):
        old.unlink()
    result = run_scenario(scenario, progress=None if quiet else
                          lambda r, n: print(f"  run {r}: {n} steps", file=sys.stderr))
    for lg in result.runs:
        write_run_log(run_dir / f"{lg.run_id}.csv", lg)
    meta = {
        "format": "fastslow-run-dir v1",
        "scenario": scenario.name,
        "seed": scenario.seed,
        "fast_adaptation": scenario.fast_adaptation,
        "long_term": scenario.long_term,
        "horizon": scenario.controller.horizon,
        "dt": scenario.controller.dt,
        "runs": [lg.run_id for lg in result.runs],
        "vertex_s": [float(s) for s in scenario.path.s],
    }
    _write(run_dir / META_FILE, json.dumps(meta, indent=1) + "\n")
    _write(run_dir / "controller.toml", config_to_toml(scenario.controller))
    table = write_tables(run_dir, result.runs, meta)
    return result, table


def _load_meta(run_dir: FsPath) -> dict:
    try:
        meta = json.loads((run_dir / META_FILE).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise MetricsError(f"{run_dir}: cannot read {META_FILE}: {exc}") from exc
    for key in ("scenario", "seed", "fast_adaptation", "long_term", "horizon", "dt", "runs",
                "vertex_s"):
        if key not in meta:
            raise MetricsError(f"{run_dir / META_FILE}: missing '{key}'")
    return meta


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    if args.controller:
        sc = replace(sc, controller=load_config(args.controller))
    if args.runs is not None:
        if args.runs < 1:
            raise ScenarioError("--runs must be positive")
        sc = replace(sc, conditions=(sc.conditions * args.runs)[:args.runs])
    run_dir = FsPath(args.out or default_out_dir()) / sc.name
    result, table = simulate(sc, run_dir, args.quiet)
    print(table.to_text())
    if result.solve_times:
        step = np.add(result.solve_times, result.model_times)
        print(f"mean control step {1e3 * step.mean():.2f} ms over {step.size} steps")
    print(f"wrote {run_dir}")
    return 1 if any(r.aborted for r in result.runs) else 0


def cmd_metrics(args) -> int:
    run_dir = FsPath(args.run_dir)
    meta = _load_meta(run_dir)
    logs = [read_run_log(run_dir / f"{rid}.csv") for rid in meta["runs"]]
    table = write_tables(run_dir, logs, meta)
    print(table.to_text())
    return 0


def ablation_table(rows) -> str:
    """rows: (name, pre median, [post median per run])."""
    n_runs = max(len(r[2]) for r in rows)
    head = ["config", "pre_median"] + [f"post_run{i}" for i in range(1, n_runs + 1)]
    lines = [f"# {ABLATION_FORMAT}", ",".join(head)]
    for name, pre, post in rows:
        lines.append(",".join([name, fmt(pre), *(fmt(p) for p in post)]))
    return "\n".join(lines) + "\n"


def run_ablation(scenario, split_vertex: int, out_dir: FsPath | None = None, quiet=True):
    rows = []
    results = {}
    for name, fast, lt in ABLATION_CONFIGS:
        sc = replace(scenario, fast_adaptation=fast, long_term=lt)
        if out_dir is not None:
            res, _ = simulate(replace(sc, name=f"{scenario.name}-{name}"),
                              out_dir / f"{scenario.name}-{name}", quiet)
        else:
            res = run_scenario(sc)
        pre, post = zip(*(split_lateral_medians(lg, split_vertex) for lg in res.runs))
        rows.append((name, float(np.median(pre)), list(post)))
        results[name] = res
    return rows, results


def cmd_ablation(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    if args.runs is not None:
        sc = replace(sc, conditions=(sc.conditions * args.runs)[:args.runs])
    split = args.split_vertex
    if split is None:
        split = sc.disturbance.entries[0][0] if sc.disturbance.entries else sc.path.n_vertices // 2
    out = FsPath(args.out or default_out_dir())
    out.mkdir(parents=True, exist_ok=True)
    rows, _ = run_ablation(sc, split, out if args.keep_logs else None, quiet=True)
    text = ablation_table(rows)
    _write(out / f"{sc.name}-ablation.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench
    report = run_bench(steps=args.steps, backends=args.backend)
    sys.stdout.write(report)
    return 0


def cmd_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastslow", description=__doc__)
    p.add_argument("--version", action="version", version=f"fastslow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write logs and metrics")
    s.add_argument("scenario", help="scenario file or bundled scenario name")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    s.add_argument("--runs", type=int, help="override the number of runs")
    s.add_argument("--controller", help="controller TOML overriding the scenario's")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("metrics", help="recompute tables from a run directory")
    m.add_argument("run_dir")
    m.set_defaults(func=cmd_metrics)

    a = sub.add_parser("ablation", help="compare none / long-term / fast / both learning")
    a.add_argument("scenario")
    a.add_argument("--seed", type=int)
    a.add_argument("--runs", type=int)
    a.add_argument("--out")
    a.add_argument("--split-vertex", type=int,
                   help="pre/post boundary (default: first disturbance vertex)")
    a.add_argument("--keep-logs", action="store_true", help="also write per-config run dirs")
    a.set_defaults(func=cmd_ablation)

    b = sub.add_parser("bench", help="time model update and MPC solve per backend")
    b.add_argument("--steps", type=int, default=100)
    b.add_argument("--backend", action="append", choices=("numba", "numpy"),
                   help="backend(s) to time (default both)")
    b.set_defaults(func=cmd_bench)

    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, ConfigError, MetricsError, PathError) as exc:
        print(f"fastslow: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
