from dataclasses import replace

import numpy as np
import pytest

from fastslow.path import Path, read_path
from fastslow.sim import (COL, CONDITIONS, DATA_DIR, LOG_COLUMNS, DisturbanceSchedule,
                          OperatingCondition, Scenario, ScenarioError, bundled_scenarios,
                          lag_condition, load_scenario, plant_step, run_scenario,
                          scenario_from_dict)
from fastslow.vehicle import ActuatorParams, step_mean
from fastslow.wblr import NigPosterior, predict

NONE = DisturbanceSchedule()


def quiet(cond):
    return replace(cond, noise_std_v=0.0, noise_std_omega=0.0)


def test_noise_free_plant_matches_learner_model_exactly():
    cond = quiet(CONDITIONS["nominal"])
    p = ActuatorParams(np.array(cond.true_w_v), np.array(cond.true_w_omega))
    mv = NigPosterior(cond.true_w_v, np.eye(2), 10.0, 1.0)
    mw = NigPosterior(cond.true_w_omega, np.eye(2), 10.0, 1.0)
    rng = np.random.default_rng(0)
    z = np.array([0.0, 0.0, 0.3, 1.0, 0.1])
    for _ in range(100):
        u = rng.uniform(-1, 2, size=2)
        nxt = plant_step(z, u, cond, NONE, 0, None)
        assert np.allclose(nxt, step_mean(z, u, p), atol=1e-12)
        g = (nxt[3:] - z[3:]) / 0.1
        assert predict(mv, [u[0], z[3]]).mean == pytest.approx(g[0], abs=1e-12)
        assert predict(mw, [u[1], z[4]]).mean == pytest.approx(g[1], abs=1e-12)
        z = nxt


def steady_omega(cond, w_cmd=0.8, steps=400):
    z = np.zeros(5)
    for _ in range(steps):
        z = plant_step(z, [0.0, w_cmd], quiet(cond), NONE, 0, None)
    return z[4]


def test_understeer_steady_state_is_seventy_percent():
    ratio = steady_omega(CONDITIONS["loaded_understeer"]) / steady_omega(CONDITIONS["loaded"])
    assert ratio == pytest.approx(0.7, abs=1e-12)
    ratio = steady_omega(CONDITIONS["loaded_oversteer"]) / steady_omega(CONDITIONS["loaded"])
    assert ratio == pytest.approx(1.2, abs=1e-12)


def test_disturbance_schedule():
    sched = DisturbanceSchedule(((100, 0.5),))
    assert sched.multiplier(99) == 1.0
    assert sched.multiplier(100) == 0.5
    assert sched.multiplier(200) == 0.5
    two = DisturbanceSchedule(((150, 0.8), (100, 0.5)))
    assert two.multiplier(120) == 0.5 and two.multiplier(150) == 0.8
    cond = quiet(CONDITIONS["nominal"])
    z = np.array([0, 0, 0, 1.0, 0.0])
    before = plant_step(z, [1.0, 1.0], cond, sched, 99, None)
    after = plant_step(z, [1.0, 1.0], cond, sched, 100, None)
    assert after[4] == pytest.approx(0.5 * before[4], rel=1e-12)
    with pytest.raises(ScenarioError):
        sched.validate(100)


def test_command_saturation():
    cond = quiet(CONDITIONS["nominal"])
    z = np.zeros(5)
    a = plant_step(z, [9.0, -9.0], cond, NONE, 0, None, bounds=(-1, 3, -2, 2))
    b = plant_step(z, [3.0, -2.0], cond, NONE, 0, None)
    assert np.array_equal(a, b)


def test_actuator_energy_decays_without_commands():
    for cond in CONDITIONS.values():
        z = np.array([0, 0, 0, 2.0, 1.0])
        prev = z[3] ** 2 + z[4] ** 2
        for _ in range(50):
            z = plant_step(z, [0.0, 0.0], quiet(cond), NONE, 0, None)
            e = z[3] ** 2 + z[4] ** 2
            assert e < prev
            prev = e


def test_process_noise_statistics():
    cond = CONDITIONS["nominal"]
    rng = np.random.default_rng(1)
    z = np.zeros(5)
    g = []
    for _ in range(20000):
        nxt = plant_step(z, [0.0, 0.0], cond, NONE, 0, rng)
        g.append((nxt[3:] - z[3:]) / 0.1)
    std = np.std(np.array(g), axis=0)
    assert std == pytest.approx([0.05, 0.1], rel=0.03)


def test_conditions_stable_and_validated():
    for c in CONDITIONS.values():
        assert c.is_stable(0.1)
    assert not lag_condition("fast", 0.04, 0.3).is_stable(0.1)
    with pytest.raises(ScenarioError):
        OperatingCondition("x", (1, -1, 0), (1, -1))
    with pytest.raises(ScenarioError):
        lag_condition("x", 0.4, 0.3, noise_std_v=-1)


def short_scenario(**kw):
    base = load_scenario("circle_disturbance")
    return replace(base, conditions=base.conditions[:2], **kw)


def test_same_seed_gives_identical_logs():
    a = run_scenario(short_scenario(seed=7))
    b = run_scenario(short_scenario(seed=7))
    for ra, rb in zip(a.runs, b.runs):
        assert ra.rows.tobytes() == rb.rows.tobytes()
    c = run_scenario(short_scenario(seed=8))
    assert c.runs[0].rows.tobytes() != a.runs[0].rows.tobytes()


def test_run_log_contents():
    res = run_scenario(short_scenario())
    log = res.runs[1]
    assert log.rows.shape[1] == len(LOG_COLUMNS)
    assert not log.aborted
    assert np.all(np.isfinite(log.rows))
    assert np.all(np.diff(log.col("step")) == 1)
    assert np.all(np.diff(log.col("vertex_id")) >= 0)
    assert log.col("vertex_id")[-1] >= 198
    # the multiplier column picks up the disturbance at vertex 100
    m = log.col("turn_multiplier")
    v = log.col("vertex_id")
    assert np.all(m[v < 100] == 1.0) and np.all(m[v >= 100] == 0.5)
    # the first run has nothing to weight; the second one has
    assert res.runs[0].col("accepted_runs").max() == 0
    assert res.store.count(1) == res.runs[0].n_steps


def test_two_lap_run_sample_count():
    # two laps of the 65 m loop at 2 m/s and 10 Hz is about 650 samples
    loop = read_path(DATA_DIR / "paths" / "mixed_loop.csv")
    pts = np.vstack([loop.vertices, loop.vertices[1:]])
    path = Path(pts, name="mixed_two_laps")
    # resampling the vertices again can drop at most one spacing
    assert path.length == pytest.approx(2 * loop.length, abs=loop.spacing)
    sc = Scenario("count", path, (CONDITIONS["loaded"],), seed=3)
    res = run_scenario(sc)
    (log,) = res.runs
    n = res.store.count(1)
    assert n == log.n_steps
    assert abs(n - 650) <= 0.05 * 650
    assert len(res.solve_times) >= n


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    assert names == ["circle_disturbance.scn", "long_course.scn", "mixed_loop_conditions.scn",
                     "mixed_loop_loaded.scn"]
    for n in names:
        sc = load_scenario(n)
        assert sc.n_runs >= 1
    sc = load_scenario("circle_disturbance")
    assert sc.n_runs == 8 and sc.desired_speed == 2.0
    assert sc.disturbance.entries == ((100, 0.5),)
    assert sc.path.n_vertices == 201


BASE = {"path": "circle_two_laps.csv", "runs": 2}


@pytest.mark.parametrize("patch", [
    {"bogus": 1},
    {"format": "fastslow-scenario v9"},
    {"runs": 0},
    {"runs": True},
    {"conditions": ["nope"]},
    {"conditions": ["nominal", "loaded", "loaded"]},
    {"disturbance": [{"vertex": 10}]},
    {"disturbance": [{"vertex": 500, "turn_multiplier": 0.5}]},
    {"seed": -1},
    {"desired_speed": "fast"},
    {"desired_speed": 0.0},
    {"fast_adaptation": "yes"},
    {"path": "missing.csv"},
    {"path": 3},
    {"name": ["x"]},
    {"conditions": [["nominal"]]},
    {"disturbance": [{"vertex": "ten", "turn_multiplier": 0.5}]},
    {"disturbance": [{"vertex": 10, "turn_multiplier": "half"}]},
    {"disturbance": {"vertex": 10}},
    {"controller": {"horizon": -3}},
    {"controller": 3},
    {"condition": {"bad": {"tau_v": 0.01}}, "conditions": ["bad"]},
    {"condition": {"bad": {"colour": 1}}},
])
def test_invalid_scenarios_rejected(patch):
    data = dict(BASE)
    data.update(patch)
    with pytest.raises(ScenarioError):
        scenario_from_dict(data)


def test_custom_condition_table():
    data = dict(BASE, condition={"slow": {"tau_v": 0.8, "tau_omega": 0.6,
                                          "turn_multiplier": 0.9}},
                conditions=["slow", "nominal"])
    sc = scenario_from_dict(data)
    assert sc.conditions[0].true_w_v == (1.25, -1.25)
    assert sc.conditions[0].turn_multiplier == 0.9
    assert sc.conditions[1] is CONDITIONS["nominal"]


@pytest.mark.parametrize("text", ["runs = [", "path = 3\nruns = 1"])
def test_malformed_scenario_files(tmp_path, text):
    f = tmp_path / "bad.scn"
    f.write_text(text)
    with pytest.raises(ScenarioError):
        load_scenario(f)


def test_missing_scenario():
    with pytest.raises(ScenarioError):
        load_scenario("does_not_exist")


def test_log_column_index():
    assert COL["vertex_id"] == 0 and LOG_COLUMNS[-1] == "accepted_runs"
    assert len(set(LOG_COLUMNS)) == len(LOG_COLUMNS)
