"""Control-step latency for the numba and pure-numpy backends.

The backend is fixed at import time, so each one is timed in a fresh
interpreter with ``FASTSLOW_DISABLE_NUMBA`` set accordingly.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np


def _worker(steps: int) -> dict:
    from ._accel import backend
    from .belief import Belief
    from .experience import (ExperienceSample, ExperienceStore, LearningPipeline,
                             SectionWindows, upcoming_span)
    from .sim import CONDITIONS, DisturbanceSchedule, load_scenario, plant_step
    from .mpc import ContouringMPC
    from .vehicle import feature_and_target
    from .wblr import default_prior

    sc = load_scenario("circle_disturbance")
    cfg = sc.controller
    path = sc.path
    base = (default_prior(cfg.prior.tau_v), default_prior(cfg.prior.tau_omega))
    store = ExperienceStore(path.n_vertices)
    span = upcoming_span(cfg.horizon, cfg.dt, sc.desired_speed, path.spacing)
    learner = LearningPipeline(base, store, windows=SectionWindows(30, span))
    mpc = ContouringMPC(path, cfg)
    rng = np.random.default_rng(0)
    cond = CONDITIONS["nominal"]
    c = cfg.constraints
    bounds = (c.v_cmd_min, c.v_cmd_max, c.omega_cmd_min, c.omega_cmd_max)
    fr = path.frames(0.0)
    z0 = np.array([fr.position[0, 0], fr.position[0, 1], fr.heading[0], 2.0,
                   2.0 * fr.curvature[0]])

    model_t, solve_t, kkt = [], [], []
    # two runs so the second exercises long-term weighting; the first warms the JIT
    for run_id in (1, 2):
        learner.start_run(reset_fast=True)
        z, s, warm, u_prev, v_prev, prev = z0.copy(), 0.0, None, None, None, None
        limit = steps if run_id == 2 else min(steps, 40)
        for k in range(limit):
            s = path.project(z[:2], s)
            vertex = path.vertex_at(s)
            if s >= path.length - path.spacing:
                break
            t0 = time.perf_counter()
            if prev is not None:
                (xv, gv), (xw, gw) = feature_and_target(prev[0], prev[1], z[3:5], cfg.dt)
                learner.observe(run_id, prev[2], ExperienceSample([xv, xw], [gv, gw], k * cfg.dt))
            step = learner.step_model(run_id, vertex)
            t1 = time.perf_counter()
            sol = mpc.solve_with_models(Belief.certain(z), *step.models, s, sc.desired_speed,
                                        u_prev=u_prev, v_prev=v_prev, warm=warm)
            t2 = time.perf_counter()
            if run_id == 2:
                model_t.append(t1 - t0)
                solve_t.append(t2 - t1)
                kkt.extend(sol.diagnostics.kkt_residuals)
            prev = (z[3:5].copy(), sol.u0, vertex)
            z = plant_step(z, sol.u0, cond, DisturbanceSchedule(), vertex, rng, cfg.dt, bounds)
            warm, u_prev, v_prev = sol.shifted(), sol.u0, float(sol.v_ref[0])
    step_t = np.add(model_t, solve_t)
    return {
        "backend": backend(),
        "steps": int(step_t.size),
        "mean_step_ms": 1e3 * float(step_t.mean()),
        "p95_step_ms": 1e3 * float(np.percentile(step_t, 95)),
        "mean_model_ms": 1e3 * float(np.mean(model_t)),
        "mean_solve_ms": 1e3 * float(np.mean(solve_t)),
        "max_kkt": float(np.max(kkt)),
    }


def time_backend(name: str, steps: int) -> dict:
    env = dict(os.environ)
    if name == "numpy":
        env["FASTSLOW_DISABLE_NUMBA"] = "1"
    else:
        env.pop("FASTSLOW_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, "-m", "fastslow.bench", "--worker", str(steps)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def run_bench(steps: int = 100, backends=None) -> str:
    backends = backends or ["numba", "numpy"]
    rows = [time_backend(b, steps) for b in backends]
    lines = ["backend  steps  mean_step_ms  p95_step_ms  model_ms  solve_ms  max_kkt"]
    for r in rows:
        lines.append(f"{r['backend']:<7}  {r['steps']:>5}  {r['mean_step_ms']:>12.2f}  "
                     f"{r['p95_step_ms']:>11.2f}  {r['mean_model_ms']:>8.2f}  "
                     f"{r['mean_solve_ms']:>8.2f}  {r['max_kkt']:.1e}")
    if len(rows) == 2 and rows[0]["mean_step_ms"] > 0:
        lines.append(f"speed-up {rows[1]['mean_step_ms'] / rows[0]['mean_step_ms']:.1f}x "
                     f"({rows[0]['backend']} vs {rows[1]['backend']})")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    if len(sys.argv) == 3 and sys.argv[1] == "--worker":
        print(json.dumps(_worker(int(sys.argv[2]))))
    else:
        sys.stdout.write(run_bench())
