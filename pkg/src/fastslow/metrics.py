"""Run logs, multi-step prediction metrics and result tables.

All tables are computed from the persisted run logs, so ``fastslow metrics``
reproduces what ``fastslow simulate`` wrote byte for byte.  Floats are
written with 17 significant digits and round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np

from . import kernels
from .belief import param_cov, process_noise
from .sim import COL, LOG_COLUMNS, RunLog
from .wblr import NigPosterior, noise_variance

RUNLOG_FORMAT = "fastslow-runlog v1"
TABLE_FORMAT = "fastslow-metrics v1"
PERCENTILES_FORMAT = "fastslow-lateral-percentiles v1"
SUMMARY_FORMAT = "fastslow-summary v1"

# numpy's default "linear" method: rank (n-1)q/100, interpolated between neighbours
PERCENTILE_METHOD = "linear"
RMSZ_OVERCONFIDENT = 2.0
RMSZ_BAND = (0.0, 1.5)
CHANNELS = ("v", "omega")


class MetricsError(ValueError):
    pass


def fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


# --------------------------------------------------------------------------
# run logs
# --------------------------------------------------------------------------

def write_run_log(path, log: RunLog) -> None:
    msg = log.message.replace("\n", " ").replace("\r", " ")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {RUNLOG_FORMAT}\n")
        fh.write(f"# run_id={log.run_id}\n")
        fh.write(f"# condition={log.condition}\n")
        fh.write(f"# aborted={int(log.aborted)}\n")
        fh.write(f"# message={msg}\n")
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log.rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_run_log(path) -> RunLog:
    path = FsPath(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise MetricsError(f"cannot read run log {path}: {exc}") from exc
    if not lines or lines[0] != f"# {RUNLOG_FORMAT}":
        raise MetricsError(f"{path}: not a '{RUNLOG_FORMAT}' file")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, val = lines[i][2:].partition("=")
        meta[key] = val
        i += 1
    if i >= len(lines) or tuple(lines[i].split(",")) != LOG_COLUMNS:
        raise MetricsError(f"{path}: unexpected column header")
    rows = []
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(LOG_COLUMNS):
            raise MetricsError(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} columns")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise MetricsError(f"{path}:{lineno}: {exc}") from exc
    try:
        run_id = int(meta["run_id"])
        aborted = bool(int(meta.get("aborted", "0")))
    except (KeyError, ValueError) as exc:
        raise MetricsError(f"{path}: bad metadata ({exc})") from exc
    arr = np.array(rows, dtype=float).reshape(-1, len(LOG_COLUMNS))
    return RunLog(run_id, meta.get("condition", ""), arr, aborted, meta.get("message", ""))


# --------------------------------------------------------------------------
# horizon predictions
# --------------------------------------------------------------------------

@dataclass
class HorizonRecord:
    """Open-loop prediction from step ``step`` with the inputs actually applied.

    Arrays have shape (H, 2): columns are the v and omega channels at
    k+1..k+H.
    """

    run_id: int
    step: int
    mean: np.ndarray
    std: np.ndarray
    realized: np.ndarray

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]


def _model(rec) -> NigPosterior:
    return NigPosterior.from_record(rec, 2)


def horizon_records(log: RunLog, horizon: int, dt: float) -> list[HorizonRecord]:
    """One record per step that has ``horizon`` realized steps after it."""
    rows = log.rows
    n = rows.shape[0]
    out = []
    if n <= horizon:
        return out
    Z = rows[:, [COL["x"], COL["y"], COL["theta"], COL["v"], COL["omega"]]]
    U = np.ascontiguousarray(rows[:, [COL["v_cmd"], COL["omega_cmd"]]])
    rv = log.model_records("v")
    rw = log.model_records("omega")
    cov0 = np.zeros((5, 5))
    for k in range(n - horizon):
        mv, mw = _model(rv[k]), _model(rw[k])
        w = np.concatenate([mv.w_mean, mw.w_mean])
        q = process_noise(noise_variance(mv), noise_variance(mw), dt)
        Uk = np.ascontiguousarray(U[k:k + horizon])
        Zp = kernels.rollout(np.ascontiguousarray(Z[k]), Uk, w, dt)
        covs = kernels.propagate_cov(Zp, Uk, w, param_cov(mv, mw), q, dt, 0.0, 0.0, False, cov0)
        mean = Zp[1:, 3:5].copy()
        std = np.sqrt(np.maximum(covs[1:, [3, 4], [3, 4]], 0.0))
        out.append(HorizonRecord(log.run_id, k, mean, std, Z[k + 1:k + 1 + horizon, 3:5].copy()))
    return out


def m_rmse(record: HorizonRecord, channel: int = 1) -> float:
    if record.horizon < 1:
        raise MetricsError("empty horizon")
    e = record.realized[:, channel] - record.mean[:, channel]
    return float(np.sqrt(np.mean(e * e)))


def m_rmsz(record: HorizonRecord, channel: int = 1) -> float:
    if record.horizon < 1:
        raise MetricsError("empty horizon")
    s = record.std[:, channel]
    if np.any(~(s > 0)):
        raise MetricsError(f"zero predictive std in record at step {record.step}")
    z = (record.realized[:, channel] - record.mean[:, channel]) / s
    return float(np.sqrt(np.mean(z * z)))


def overconfident(value: float) -> bool:
    return value > RMSZ_OVERCONFIDENT


def percentiles(values, q=(25.0, 50.0, 75.0)) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return np.full(len(q), np.nan)
    return np.percentile(v, q, method=PERCENTILE_METHOD)


# --------------------------------------------------------------------------
# lateral error
# --------------------------------------------------------------------------

def vertex_lateral_error(log: RunLog, vertex_s: np.ndarray) -> np.ndarray:
    """|contour error| interpolated in arc-length at each vertex; NaN where not reached.

    On multi-lap paths arc-length keeps increasing, so each vertex is visited once.
    """
    s = log.col("s")
    e = np.abs(log.col("lateral_error"))
    out = np.full(vertex_s.size, np.nan)
    if s.size == 0:
        return out
    order = np.argsort(s, kind="stable")
    s, e = s[order], e[order]
    inside = (vertex_s >= s[0]) & (vertex_s <= s[-1])
    out[inside] = np.interp(vertex_s[inside], s, e)
    return out


def lateral_percentiles(logs: Sequence[RunLog], vertex_s) -> np.ndarray:
    """Per-vertex cross-run (25, 50, 75) percentiles of |contour error|, shape (n, 3)."""
    if not logs:
        raise MetricsError("need at least one run")
    vertex_s = np.asarray(vertex_s, dtype=float)
    per_run = np.vstack([vertex_lateral_error(lg, vertex_s) for lg in logs])
    out = np.full((vertex_s.size, 3), np.nan)
    for i in range(vertex_s.size):
        col = per_run[:, i]
        col = col[np.isfinite(col)]
        if col.size:
            out[i] = percentiles(col)
    return out


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

TABLE_COLUMNS = (
    "run_id", "condition", "steps", "aborted",
    "m_rmse_omega_p25", "m_rmse_omega_p50", "m_rmse_omega_p75",
    "m_rmsz_omega_p25", "m_rmsz_omega_p50", "m_rmsz_omega_p75", "m_rmsz_omega_frac_over_2",
    "m_rmse_v_p50", "m_rmsz_v_p50",
    "lateral_rms", "lateral_max",
)


@dataclass
class RunMetrics:
    run_id: int
    condition: str
    steps: int
    aborted: bool
    m_rmse_omega: np.ndarray   # p25, p50, p75
    m_rmsz_omega: np.ndarray
    frac_over_2: float
    m_rmse_v_p50: float
    m_rmsz_v_p50: float
    lateral_rms: float
    lateral_max: float

    def cells(self) -> list[str]:
        return [str(self.run_id), self.condition, str(self.steps), str(int(self.aborted)),
                *(fmt(x) for x in self.m_rmse_omega), *(fmt(x) for x in self.m_rmsz_omega),
                fmt(self.frac_over_2), fmt(self.m_rmse_v_p50), fmt(self.m_rmsz_v_p50),
                fmt(self.lateral_rms), fmt(self.lateral_max)]


def run_metrics(log: RunLog, horizon: int, dt: float) -> RunMetrics:
    recs = horizon_records(log, horizon, dt)
    e_w = np.array([m_rmse(r, 1) for r in recs])
    z_w = np.array([m_rmsz(r, 1) for r in recs])
    e_v = np.array([m_rmse(r, 0) for r in recs])
    z_v = np.array([m_rmsz(r, 0) for r in recs])
    lat = log.col("lateral_error")
    return RunMetrics(
        log.run_id, log.condition, log.n_steps, log.aborted,
        percentiles(e_w), percentiles(z_w),
        float(np.mean(z_w > RMSZ_OVERCONFIDENT)) if z_w.size else math.nan,
        float(percentiles(e_v, (50.0,))[0]), float(percentiles(z_v, (50.0,))[0]),
        float(np.sqrt(np.mean(lat * lat))) if lat.size else math.nan,
        float(np.max(np.abs(lat))) if lat.size else math.nan,
    )


class MetricTable:
    def __init__(self, rows: Sequence[RunMetrics]):
        self.rows = list(rows)

    @classmethod
    def from_logs(cls, logs: Sequence[RunLog], horizon: int, dt: float) -> "MetricTable":
        return cls([run_metrics(lg, horizon, dt) for lg in logs])

    def to_csv(self) -> str:
        lines = [f"# {TABLE_FORMAT}", ",".join(TABLE_COLUMNS)]
        lines += [",".join(r.cells()) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ("run", "condition", "M-RMSE w p50 [p25,p75]", "M-RMSZ w p50 [p25,p75]",
                "lat RMS", "lat max")
        out = ["{:>3}  {:<18}  {:<26}  {:<24}  {:>8}  {:>8}".format(*head)]
        for r in self.rows:
            e, z = r.m_rmse_omega, r.m_rmsz_omega
            out.append("{:>3}  {:<18}  {:<26}  {:<24}  {:>8.4f}  {:>8.4f}".format(
                r.run_id, r.condition, f"{e[1]:.4f} [{e[0]:.4f},{e[2]:.4f}]",
                f"{z[1]:.3f} [{z[0]:.3f},{z[2]:.3f}]", r.lateral_rms, r.lateral_max))
        return "\n".join(out)


def percentiles_csv(vertex_s, table: np.ndarray) -> str:
    lines = [f"# {PERCENTILES_FORMAT}", "vertex_id,s,p25,p50,p75"]
    for i, (s, row) in enumerate(zip(vertex_s, table)):
        lines.append(",".join([str(i), fmt(s), *(fmt(x) for x in row)]))
    return "\n".join(lines) + "\n"


def summary_dict(name: str, seed: int, fast: bool, long_term: bool, table: MetricTable) -> dict:
    def num(x):
        x = float(x)
        return None if not math.isfinite(x) else x

    return {
        "format": SUMMARY_FORMAT,
        "scenario": name,
        "seed": seed,
        "fast_adaptation": fast,
        "long_term": long_term,
        "runs": [
            {"run_id": r.run_id, "condition": r.condition, "steps": r.steps,
             "aborted": r.aborted,
             "m_rmse_omega": [num(x) for x in r.m_rmse_omega],
             "m_rmsz_omega": [num(x) for x in r.m_rmsz_omega],
             "m_rmsz_omega_frac_over_2": num(r.frac_over_2),
             "lateral_rms": num(r.lateral_rms), "lateral_max": num(r.lateral_max)}
            for r in table.rows
        ],
    }


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# disturbance ablation
# --------------------------------------------------------------------------

ABLATION_CONFIGS = (
    ("none", False, False),
    ("long_term", False, True),
    ("fast", True, False),
    ("both", True, True),
)


def split_lateral_medians(log: RunLog, vertex: int) -> tuple[float, float]:
    """Median |contour error| before and from ``vertex`` on."""
    v = log.col("vertex_id")
    e = np.abs(log.col("lateral_error"))
    pre = e[v < vertex]
    post = e[v >= vertex]
    return (float(np.median(pre)) if pre.size else math.nan,
            float(np.median(post)) if post.size else math.nan)
