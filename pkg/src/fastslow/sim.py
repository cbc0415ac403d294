"""Simulated ground vehicle, operating conditions and scenario execution.

The plant is the same unicycle with first-order actuators that the
controller learns, but with condition-specific parameters, a turn-command
multiplier applied inside the plant, Gaussian process noise on the actuator
channels, and command saturation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np

from .belief import Belief
from .config import ConfigError, ControllerConfig, config_from_dict, load_config
from .experience import (ExperienceSample, ExperienceStore, LearningPipeline, SectionWindows,
                         upcoming_span)
from .mpc import ContouringMPC, MPCError
from .path import Path, PathError, read_path
from .vehicle import feature_and_target, wrap_angle
from .wblr import default_prior

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

SCENARIO_FORMAT = "fastslow-scenario v1"
DATA_DIR = FsPath(__file__).parent / "data"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class OperatingCondition:
    name: str
    true_w_v: tuple
    true_w_omega: tuple
    turn_multiplier: float = 1.0
    noise_std_v: float = 0.05
    noise_std_omega: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "true_w_v", tuple(float(x) for x in self.true_w_v))
        object.__setattr__(self, "true_w_omega", tuple(float(x) for x in self.true_w_omega))
        if len(self.true_w_v) != 2 or len(self.true_w_omega) != 2:
            raise ScenarioError("plant parameters are 2-vectors")
        if min(self.noise_std_v, self.noise_std_omega) < 0:
            raise ScenarioError("noise std must be >= 0")

    def is_stable(self, dt: float = 0.1) -> bool:
        """Actuator poles ``1 + dt*w[1]`` inside the unit circle."""
        return abs(1.0 + dt * self.true_w_v[1]) < 1.0 and abs(1.0 + dt * self.true_w_omega[1]) < 1.0

    def effective_w_omega(self, extra_multiplier: float = 1.0) -> np.ndarray:
        """Turn-channel parameters as seen from the commanded (pre-multiplier) input."""
        m = self.turn_multiplier * extra_multiplier
        return np.array([self.true_w_omega[0] * m, self.true_w_omega[1]])


def lag_condition(name, tau_v, tau_omega, turn_multiplier=1.0, noise_std_v=0.05,
                  noise_std_omega=0.1) -> OperatingCondition:
    return OperatingCondition(name, (1 / tau_v, -1 / tau_v), (1 / tau_omega, -1 / tau_omega),
                              turn_multiplier, noise_std_v, noise_std_omega)


# "loaded" is a simulation stand-in: longer actuator time constants
CONDITIONS = {
    "nominal": lag_condition("nominal", 0.4, 0.3),
    "loaded": lag_condition("loaded", 0.6, 0.45),
    "loaded_understeer": lag_condition("loaded_understeer", 0.6, 0.45, 0.7),
    "loaded_oversteer": lag_condition("loaded_oversteer", 0.6, 0.45, 1.2),
}


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Turn-command multipliers switched on from a vertex onwards (latest entry wins)."""

    entries: tuple = ()

    def __post_init__(self):
        ent = tuple(sorted((int(v), float(m)) for v, m in self.entries))
        object.__setattr__(self, "entries", ent)

    def multiplier(self, vertex: int) -> float:
        m = 1.0
        for v, mult in self.entries:
            if vertex >= v:
                m = mult
        return m

    def validate(self, n_vertices: int):
        for v, _ in self.entries:
            if not 0 <= v < n_vertices:
                raise ScenarioError(f"disturbance vertex {v} outside path")


def plant_step(state, u, condition: OperatingCondition, schedule: DisturbanceSchedule,
               vertex: int, rng: np.random.Generator | None, dt: float = 0.1,
               bounds: tuple | None = None) -> np.ndarray:
    """Advance the true vehicle one step.

    Commands are saturated to ``bounds = (v_lo, v_hi, w_lo, w_hi)``, then the
    turn command is scaled by the condition and disturbance multipliers.
    """
    z = np.asarray(state, dtype=float)
    v_cmd, w_cmd = float(u[0]), float(u[1])
    if bounds is not None:
        v_cmd = min(max(v_cmd, bounds[0]), bounds[1])
        w_cmd = min(max(w_cmd, bounds[2]), bounds[3])
    w_cmd *= condition.turn_multiplier * schedule.multiplier(vertex)
    if rng is None:
        eta_v = eta_w = 0.0
    else:
        eta_v, eta_w = rng.standard_normal(2)
        eta_v *= condition.noise_std_v
        eta_w *= condition.noise_std_omega
    wv, ww = condition.true_w_v, condition.true_w_omega
    x, y, th, v, om = z
    out = np.array([
        x + dt * v * math.cos(th),
        y + dt * v * math.sin(th),
        wrap_angle(th + dt * om),
        v + dt * (wv[0] * v_cmd + wv[1] * v + eta_v),
        om + dt * (ww[0] * w_cmd + ww[1] * om + eta_w),
    ])
    return out


@dataclass
class Scenario:
    name: str
    path: Path
    conditions: tuple            # one condition per run
    disturbance: DisturbanceSchedule = field(default_factory=DisturbanceSchedule)
    desired_speed: float = 2.0
    fast_adaptation: bool = True
    long_term: bool = True
    seed: int = 0
    localization_noise_pos: float = 0.0
    localization_noise_heading: float = 0.0
    initial_speed: float | None = None
    reset_fast_each_run: bool = True
    max_steps_factor: float = 3.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    @property
    def n_runs(self) -> int:
        return len(self.conditions)

    def with_learning(self, fast: bool, long_term: bool) -> "Scenario":
        return replace(self, fast_adaptation=fast, long_term=long_term)

    def validate(self):
        if self.n_runs < 1:
            raise ScenarioError("scenario needs at least one run")
        if not self.desired_speed > 0:
            raise ScenarioError("desired speed must be positive")
        if min(self.localization_noise_pos, self.localization_noise_heading) < 0:
            raise ScenarioError("localization noise must be >= 0")
        self.disturbance.validate(self.path.n_vertices)
        for c in self.conditions:
            if not c.is_stable(self.controller.dt):
                raise ScenarioError(f"condition {c.name} is unstable at dt={self.controller.dt}")


# --------------------------------------------------------------------------
# logs
# --------------------------------------------------------------------------

LOG_COLUMNS = (
    "vertex_id", "timestamp", "v", "omega", "v_cmd", "omega_cmd", "g_v", "g_omega",
    "step", "x", "y", "theta", "s", "lateral_error", "turn_multiplier",
    "pred_contour_std", "slack_max", "qp_iterations",
    "model_v_w0", "model_v_w1", "model_v_V00", "model_v_V01", "model_v_V10", "model_v_V11",
    "model_v_a", "model_v_b",
    "model_omega_w0", "model_omega_w1", "model_omega_V00", "model_omega_V01",
    "model_omega_V10", "model_omega_V11", "model_omega_a", "model_omega_b",
    "accepted_runs",
)
COL = {name: i for i, name in enumerate(LOG_COLUMNS)}


@dataclass
class RunLog:
    run_id: int
    condition: str
    rows: np.ndarray             # (n_steps, len(LOG_COLUMNS))
    aborted: bool = False
    message: str = ""

    def col(self, name: str) -> np.ndarray:
        return self.rows[:, COL[name]]

    @property
    def n_steps(self) -> int:
        return self.rows.shape[0]

    def model_records(self, channel: str) -> np.ndarray:
        start = COL[f"model_{channel}_w0"]
        return self.rows[:, start:start + 8]


@dataclass
class ScenarioResult:
    scenario: Scenario
    runs: list
    solve_times: list = field(default_factory=list)
    model_times: list = field(default_factory=list)
    kkt_residuals: list = field(default_factory=list)
    store: ExperienceStore | None = None


def _start_state(path: Path, speed: float) -> np.ndarray:
    fr = path.frames(0.0)
    return np.array([fr.position[0, 0], fr.position[0, 1], fr.heading[0], speed,
                     speed * fr.curvature[0]])


def run_scenario(scenario: Scenario, progress=None) -> ScenarioResult:
    """Execute all runs of a scenario sequentially; deterministic given the seed."""
    scenario.validate()
    cfg = scenario.controller
    path = scenario.path
    dt = cfg.dt
    c = cfg.constraints
    bounds = (c.v_cmd_min, c.v_cmd_max, c.omega_cmd_min, c.omega_cmd_max)
    pr = cfg.prior
    base = (default_prior(pr.tau_v, pr.sigma2_v, pr.a0, pr.v0_scale),
            default_prior(pr.tau_omega, pr.sigma2_omega, pr.a0, pr.v0_scale))
    store = ExperienceStore(path.n_vertices)
    span = upcoming_span(cfg.horizon, dt, scenario.desired_speed, path.spacing,
                         cfg.learning.upcoming_margin)
    learner = LearningPipeline(
        base, store, n0=cfg.learning.n0, fast=scenario.fast_adaptation,
        long_term=scenario.long_term,
        windows=SectionWindows(cfg.learning.recent_samples, span),
        outlier_z=cfg.learning.outlier_z, outlier_alpha=cfg.learning.outlier_alpha,
        gaussian_likelihood=cfg.learning.likelihood == "gaussian")
    mpc = ContouringMPC(path, cfg)
    v0 = scenario.desired_speed if scenario.initial_speed is None else scenario.initial_speed
    expected = path.length / scenario.desired_speed / dt
    max_steps = int(scenario.max_steps_factor * expected) + 50
    result = ScenarioResult(scenario, [], store=store)

    for run_id, cond in enumerate(scenario.conditions, start=1):
        rng = np.random.default_rng(np.random.SeedSequence([int(scenario.seed), run_id]))
        loc_rng = np.random.default_rng(np.random.SeedSequence([int(scenario.seed), run_id, 1]))
        learner.start_run(reset_fast=scenario.reset_fast_each_run)
        z = _start_state(path, v0)
        s_prog = 0.0
        warm = None
        u_prev = None
        v_prev = None
        prev = None   # (measured xi, applied u, vertex) of the previous step
        rows = []
        aborted, message = False, ""
        for k in range(max_steps):
            meas = z.copy()
            if scenario.localization_noise_pos > 0 or scenario.localization_noise_heading > 0:
                n = loc_rng.standard_normal(3)
                meas[0] += scenario.localization_noise_pos * n[0]
                meas[1] += scenario.localization_noise_pos * n[1]
                meas[2] = wrap_angle(meas[2] + scenario.localization_noise_heading * n[2])
            s_prog = path.project(meas[:2], s_prog)
            vertex = path.vertex_at(s_prog)
            if prev is not None:
                (xv, gv), (xw, gw) = feature_and_target(prev[0], prev[1], meas[3:5], dt)
                learner.observe(run_id, prev[2], ExperienceSample(np.array([xv, xw]),
                                                                  np.array([gv, gw]), k * dt))
                rows[-1][COL["g_v"]] = gv
                rows[-1][COL["g_omega"]] = gw
            if s_prog >= path.length - 0.5 * path.spacing:
                rows.pop() if rows and not np.isfinite(rows[-1][COL["g_v"]]) else None
                break
            t0 = time.perf_counter()
            step = learner.step_model(run_id, vertex)
            t1 = time.perf_counter()
            try:
                sol = mpc.solve_with_models(Belief.certain(meas), step.models[0], step.models[1],
                                            s_prog, scenario.desired_speed, u_prev=u_prev,
                                            v_prev=v_prev, warm=warm)
            except MPCError as exc:
                aborted, message = True, f"step {k}: {exc}"
                log.error("run %d aborted: %s", run_id, message)
                break
            t2 = time.perf_counter()
            result.model_times.append(t1 - t0)
            result.solve_times.append(t2 - t1)
            result.kkt_residuals.extend(sol.diagnostics.kkt_residuals)
            u = sol.u0
            fr = path.frames(s_prog)
            lateral = float(fr.normal[0] @ (z[:2] - fr.position[0]))
            mult = cond.turn_multiplier * scenario.disturbance.multiplier(vertex)
            mv, mw = step.models
            row = [vertex, k * dt, z[3], z[4], u[0], u[1], math.nan, math.nan,
                   k, z[0], z[1], z[2], s_prog, lateral, mult,
                   sol.contour_std[0], sol.diagnostics.slack_max,
                   sum(sol.diagnostics.qp_iterations),
                   *mv.to_record(), *mw.to_record(),
                   sum(1 for a in step.assessments if a.weight > 0)]
            rows.append(row)
            prev = (meas[3:5].copy(), u.copy(), vertex)
            z = plant_step(z, u, cond, scenario.disturbance, vertex, rng, dt, bounds)
            warm = sol.shifted()
            u_prev = u
            v_prev = float(sol.v_ref[0])
        else:
            aborted, message = True, f"step limit {max_steps} reached"
        arr = np.array(rows, dtype=float).reshape(-1, len(LOG_COLUMNS))
        if arr.shape[0] and not np.isfinite(arr[-1, COL["g_v"]]):
            arr = arr[:-1]
        result.runs.append(RunLog(run_id, cond.name, arr, aborted, message))
        if progress is not None:
            progress(run_id, arr.shape[0])
    return result


# --------------------------------------------------------------------------
# scenario files
# --------------------------------------------------------------------------

def resolve_data_file(name, base_dir: FsPath | None = None, kind: str = "paths") -> FsPath:
    """Find ``name`` relative to ``base_dir``, the working directory, or the bundled data."""
    p = FsPath(name)
    candidates = []
    if base_dir is not None and not p.is_absolute():
        candidates.append(base_dir / p)
    candidates.append(p)
    candidates.append(DATA_DIR / kind / p.name)
    for cand in candidates:
        if cand.is_file():
            return cand
    raise ScenarioError(f"cannot find {kind[:-1]} file '{name}'")


_SCENARIO_KEYS = {
    "format", "name", "path", "runs", "conditions", "desired_speed", "seed", "fast_adaptation",
    "long_term", "localization_noise_pos", "localization_noise_heading", "initial_speed",
    "reset_fast_each_run", "controller", "disturbance", "condition", "vertex_spacing",
}


def _condition_from_table(name: str, t: dict) -> OperatingCondition:
    allowed = {"tau_v", "tau_omega", "true_w_v", "true_w_omega", "turn_multiplier",
               "noise_std_v", "noise_std_omega"}
    unknown = set(t) - allowed
    if unknown:
        raise ScenarioError(f"condition '{name}': unknown keys {sorted(unknown)}")
    try:
        if "true_w_v" in t or "true_w_omega" in t:
            return OperatingCondition(name, t["true_w_v"], t["true_w_omega"],
                                      float(t.get("turn_multiplier", 1.0)),
                                      float(t.get("noise_std_v", 0.05)),
                                      float(t.get("noise_std_omega", 0.1)))
        return lag_condition(name, float(t.get("tau_v", 0.4)), float(t.get("tau_omega", 0.3)),
                             float(t.get("turn_multiplier", 1.0)),
                             float(t.get("noise_std_v", 0.05)),
                             float(t.get("noise_std_omega", 0.1)))
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
        raise ScenarioError(f"condition '{name}': {exc}") from exc


def scenario_from_dict(data: dict, base_dir: FsPath | None = None) -> Scenario:
    unknown = set(data) - _SCENARIO_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
    if data.get("format", SCENARIO_FORMAT) != SCENARIO_FORMAT:
        raise ScenarioError(f"unsupported scenario format '{data.get('format')}'")
    if not isinstance(data.get("path"), str):
        raise ScenarioError("scenario needs a 'path' file name")
    if not isinstance(data.get("name", ""), str):
        raise ScenarioError("'name' must be a string")
    try:
        spacing = float(data.get("vertex_spacing", 0.25))
        path = read_path(resolve_data_file(data["path"], base_dir, "paths"), spacing=spacing)
    except PathError as exc:
        raise ScenarioError(str(exc)) from exc

    known = dict(CONDITIONS)
    custom = data.get("condition", {})
    if not isinstance(custom, dict):
        raise ScenarioError("[condition.<name>] tables expected")
    for cname, table in custom.items():
        if not isinstance(table, dict):
            raise ScenarioError(f"condition '{cname}' must be a table")
        known[cname] = _condition_from_table(cname, table)

    n_runs = data.get("runs", 1)
    if not isinstance(n_runs, int) or isinstance(n_runs, bool) or n_runs < 1:
        raise ScenarioError("'runs' must be a positive integer")
    names = data.get("conditions", ["nominal"])
    if isinstance(names, str):
        names = [names]
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise ScenarioError("'conditions' must be a non-empty list of names")
    for nm in names:
        if nm not in known:
            raise ScenarioError(f"unknown condition '{nm}'")
    if len(names) == 1:
        names = names * n_runs
    elif len(names) != n_runs:
        raise ScenarioError("'conditions' must have one entry or one per run")

    dist = data.get("disturbance", [])
    if not isinstance(dist, list):
        raise ScenarioError("[[disturbance]] entries expected")
    entries = []
    for d in dist:
        if not isinstance(d, dict) or set(d) != {"vertex", "turn_multiplier"}:
            raise ScenarioError("disturbance entries need exactly 'vertex' and 'turn_multiplier'")
        if (not isinstance(d["vertex"], int) or isinstance(d["vertex"], bool)
                or isinstance(d["turn_multiplier"], bool)
                or not isinstance(d["turn_multiplier"], (int, float))):
            raise ScenarioError("disturbance 'vertex' must be an integer and "
                                "'turn_multiplier' a number")
        entries.append((d["vertex"], d["turn_multiplier"]))

    ctrl = data.get("controller")
    try:
        if ctrl is None:
            controller = ControllerConfig()
        elif isinstance(ctrl, str):
            controller = load_config(resolve_data_file(ctrl, base_dir, "scenarios"))
        elif isinstance(ctrl, dict):
            controller = config_from_dict(ctrl)
        else:
            raise ScenarioError("'controller' must be a file name or table")
    except ConfigError as exc:
        raise ScenarioError(f"controller config: {exc}") from exc

    def num(key, default):
        v = data.get(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ScenarioError(f"'{key}' must be a number")
        return float(v)

    def flag(key, default):
        v = data.get(key, default)
        if not isinstance(v, bool):
            raise ScenarioError(f"'{key}' must be true or false")
        return v

    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ScenarioError("'seed' must be a non-negative integer")
    sc = Scenario(
        name=str(data.get("name", path.name)),
        path=path,
        conditions=tuple(known[n] for n in names),
        disturbance=DisturbanceSchedule(tuple(entries)),
        desired_speed=num("desired_speed", 2.0),
        fast_adaptation=flag("fast_adaptation", True),
        long_term=flag("long_term", True),
        seed=seed,
        localization_noise_pos=num("localization_noise_pos", 0.0),
        localization_noise_heading=num("localization_noise_heading", 0.0),
        initial_speed=num("initial_speed", None),
        reset_fast_each_run=flag("reset_fast_each_run", True),
        controller=controller,
    )
    sc.validate()
    return sc


def load_scenario(path_or_name) -> Scenario:
    """Load a scenario file; bare names fall back to the bundled scenarios."""
    p = FsPath(path_or_name)
    if not p.is_file():
        cand = DATA_DIR / "scenarios" / p.name
        if not cand.is_file() and not p.suffix:
            cand = DATA_DIR / "scenarios" / f"{p.name}.scn"
        if not cand.is_file():
            raise ScenarioError(f"scenario file '{path_or_name}' not found")
        p = cand
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read {p}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{p}: {exc}") from exc
    return scenario_from_dict(data, base_dir=p.parent)


def bundled_scenarios() -> list[str]:
    return sorted(f.name for f in (DATA_DIR / "scenarios").glob("*.scn"))
