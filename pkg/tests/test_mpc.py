import math

import numpy as np
import pytest
from scipy.stats import norm

import oracles
from fastslow.belief import Belief
from fastslow.config import ChanceConstraintConfig, ControllerConfig
from fastslow.experience import exceedance_probability
from fastslow.mpc import ContouringMPC
from fastslow.mpc.contour import (ReferenceProgress, contour_errors, tighten_input_constraint,
                                  tighten_state_constraint, tightened_input_bounds)
from fastslow.mpc.solver import MPCError
from fastslow.path import Path
from fastslow.vehicle import ActuatorParams, step_mean

EXACT = ActuatorParams.first_order(0.4, 0.3)
PCOV = np.diag([0.02, 0.01, 0.05, 0.02])


def start_state(path, s=0.0, speed=2.0, offset=0.0):
    fr = path.frames(s)
    p = fr.position[0] + offset * fr.normal[0]
    return np.array([p[0], p[1], fr.heading[0], speed, speed * fr.curvature[0]])


# -- contouring errors -----------------------------------------------------------

def test_on_path_errors_vanish(circle_path):
    z = start_state(circle_path, 7.0)
    e = contour_errors(z, circle_path, ReferenceProgress(7.0, 2.0))
    for val in (e.lag, e.contour, e.heading_err, e.speed_err):
        assert abs(val) < 1e-12
    assert abs(e.turn_err) < 1e-12


def test_left_offset_is_positive_contour(straight_path):
    e = contour_errors([10.0, 0.5, 0.0, 1.0, 0.0], straight_path, ReferenceProgress(10.0, 1.0))
    assert e.contour == pytest.approx(0.5, abs=1e-12)
    assert e.lag == pytest.approx(0.0, abs=1e-12)
    e = contour_errors([10.3, -0.5, 0.0, 1.0, 0.0], straight_path, ReferenceProgress(10.0, 1.0))
    assert e.contour == pytest.approx(-0.5, abs=1e-12) and e.lag == pytest.approx(0.3)


def test_errors_match_dense_projection():
    t = np.linspace(0, 30, 3001)
    path = Path(np.column_stack([t, 1.5 * np.sin(0.4 * t)]))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = np.array([rng.uniform(2, 28), rng.uniform(-1.5, 1.5)])
        s = path.project(p)
        e = contour_errors([p[0], p[1], 0.0, 1.0, 0.0], path, ReferenceProgress(s, 1.0))
        dense = np.linspace(0, path.length, 400001)
        dist = np.min(np.linalg.norm(path.frames(dense).position - p, axis=1))
        assert abs(abs(e.contour) - dist) < 1e-6
        assert abs(e.lag) < 1e-6


def test_out_of_range_reference_clamped(straight_path):
    e = contour_errors([45.0, 0.0, 0.0, 1.0, 0.0], straight_path, ReferenceProgress(50.0, 1.0))
    assert e.clamped and e.lag == pytest.approx(5.0)


# -- constraint tightening ------------------------------------------------------------

def test_zero_covariance_gives_nominal_state_constraint():
    cfg = ChanceConstraintConfig()
    b = Belief.certain(np.zeros(5))
    assert tighten_state_constraint(1.2, b, [0.0, 1.0], cfg) == pytest.approx(1.2 - 2.0)


def test_state_tightening_by_r_sigma():
    cfg = ChanceConstraintConfig(r_c=2.0)
    b = Belief(np.zeros(5), np.diag([0.04, 0.09, 0, 0, 0]))
    assert tighten_state_constraint(0.5, b, [0.0, 1.0], cfg) == pytest.approx(0.5 + 0.6 - 2.0)


def test_default_chance_constraint_values():
    cfg = ChanceConstraintConfig()
    assert cfg.r_c == 1.0 and cfg.e_c_max == 2.0
    # r = 2 is the two-sided 5% quantile to the usual rounding
    assert norm.ppf(1 - 0.05 / 2) == pytest.approx(2.0, abs=0.05)
    assert exceedance_probability(2.0) == pytest.approx(0.05, abs=0.005)


def test_input_tightening_arithmetic():
    assert tighten_input_constraint(1.0, -5.0, 0.0, 1.0, 2.0) == pytest.approx(-1.0)
    # effective bound 2.0 - 1 * 5 * 0.1 = 1.5
    assert tighten_input_constraint(1.5, -5.0, 0.1, 1.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    a = tighten_input_constraint(1.0, -2.0, 0.1, 1.0, 2.0)
    b = tighten_input_constraint(1.0, -6.0, 0.1, 1.0, 2.0)
    assert b > a
    with pytest.raises(ValueError):
        tighten_input_constraint(0.0, -5.0, -0.1, 1.0, 2.0)


def test_tightened_box_and_collapse():
    lo, hi = tightened_input_bounds(-2.0, 2.0, -5.0, np.array([0.0, 0.1, 1.0]), 1.0)
    assert np.allclose(lo, [-2.0, -1.5, 0.0]) and np.allclose(hi, [2.0, 1.5, 0.0])
    lo, hi = tightened_input_bounds(-1.0, 3.0, -5.0, 0.5, 1.0)
    assert lo == hi == 1.0


# -- solver -----------------------------------------------------------------------------

def closed_loop(path, mpc, params, pcov, z, steps, speed=2.0):
    s, warm, u_prev, v_prev = 0.0, None, None, None
    lateral, sols = [], []
    for _ in range(steps):
        s = path.project(z[:2], s)
        sol = mpc.solve(Belief.certain(z), params, pcov, s, speed, u_prev=u_prev,
                        v_prev=v_prev, warm=warm)
        sols.append(sol)
        z = step_mean(z, sol.u0, EXACT)
        fr = path.frames(path.project(z[:2], s))
        lateral.append(float(fr.normal[0] @ (z[:2] - fr.position[0])))
        warm, u_prev, v_prev = sol.shifted(), sol.u0, float(sol.v_ref[0])
    return np.array(lateral), sols


def test_defaults_match_horizon_setup():
    cfg = ControllerConfig()
    assert (cfg.horizon, cfg.dt, cfg.sqp_passes) == (30, 0.1, 3)
    assert (cfg.k_v, cfg.k_theta) == (-5.0, -5.0)
    w = cfg.weights
    assert (w.lag, w.contour, w.heading, w.speed, w.turn) == (50, 200, 200, 2, 2)
    assert (w.v_cmd, w.omega_cmd, w.v_ref) == (1, 1, 50)
    assert (w.rate_v_cmd, w.rate_omega_cmd, w.rate_v_ref) == (10, 15, 5)
    assert cfg.learning.n0 == 100


def test_straight_path_tracking(straight_path):
    mpc = ContouringMPC(straight_path)
    lat, sols = closed_loop(straight_path, mpc, EXACT, np.zeros((4, 4)),
                            start_state(straight_path), 30)
    assert abs(sols[0].u0[0] - 2.0) < 0.05
    assert np.max(np.abs(lat)) < 0.05
    for sol in sols:
        d = sol.diagnostics
        assert len(d.qp_iterations) == 3
        assert max(d.kkt_residuals) < 1e-8
        assert d.dynamics_defect <= 1e-8
        assert d.slack_max == 0.0


def test_curved_path_kkt_and_no_slack(circle_path):
    mpc = ContouringMPC(circle_path)
    lat, sols = closed_loop(circle_path, mpc, EXACT.__class__(EXACT.w_v, EXACT.w_omega, 0.01, 0.02),
                            PCOV * 0.1, start_state(circle_path, offset=0.3), 40)
    assert np.abs(lat[-1]) < 0.05
    for sol in sols:
        assert max(sol.diagnostics.kkt_residuals) < 1e-8
        assert sol.diagnostics.slack_max < 1e-9
        assert sol.states.shape == (31, 5) and sol.inputs.shape == (30, 2)
        assert np.all(np.diff(sol.s_ref) >= -1e-12)


def test_zero_uncertainty_equivalence(circle_path):
    # with no covariance the tightening vanishes, so r_c cannot change the solution
    z = start_state(circle_path, 3.0, offset=0.2)
    a = ContouringMPC(circle_path).solve(Belief.certain(z), EXACT, np.zeros((4, 4)), 3.0, 2.0)
    cfg = ControllerConfig()
    cfg = cfg.replace(constraints=ChanceConstraintConfig(r_c=0.0, r_v_cmd=0.0, r_omega_cmd=0.0))
    b = ContouringMPC(circle_path, cfg).solve(Belief.certain(z), EXACT, np.zeros((4, 4)), 3.0, 2.0)
    assert np.allclose(a.inputs, b.inputs, atol=1e-8)
    assert np.allclose(a.v_ref, b.v_ref, atol=1e-8)
    assert np.all(a.contour_std == 0.0)


def test_slack_used_only_when_tightened_set_is_infeasible(straight_path):
    # 1 m off the path cannot be brought inside a 0.2 m corridor in one step
    cfg = ControllerConfig().replace(constraints=ChanceConstraintConfig(e_c_max=0.2))
    z = start_state(straight_path, 2.0, offset=1.0)
    sol = ContouringMPC(straight_path, cfg).solve(Belief.certain(z), EXACT, np.zeros((4, 4)),
                                                  2.0, 2.0)
    assert sol.diagnostics.slack_max > 0.0
    assert max(sol.diagnostics.kkt_residuals) < 1e-8
    # inside the corridor the slack stays at zero
    z = start_state(straight_path, 2.0, offset=0.1)
    sol = ContouringMPC(straight_path, cfg).solve(Belief.certain(z), EXACT, np.zeros((4, 4)),
                                                  2.0, 2.0)
    assert sol.diagnostics.slack_max == 0.0


def test_cost_non_increasing_across_passes():
    rng = np.random.default_rng(1)
    t = np.linspace(0, 40, 4001)
    path = Path(np.column_stack([t, 2.0 * np.sin(0.25 * t)]))
    mpc = ContouringMPC(path)
    checked = 0
    for _ in range(20):
        s0 = rng.uniform(1, 20)
        z = start_state(path, s0, speed=rng.uniform(1, 2.5), offset=rng.uniform(-0.3, 0.3))
        z[2] += rng.uniform(-0.2, 0.2)
        sol = mpc.solve(Belief.certain(z), EXACT, PCOV * 0.05, s0, 2.0)
        d = sol.diagnostics
        for k in range(len(d.costs) - 1):
            if not d.trust_active[k]:
                assert d.costs[k + 1] <= d.costs[k] * (1 + 1e-9) + 1e-12
                checked += 1
    assert checked > 20


def test_input_boxes_respected(circle_path):
    z = start_state(circle_path, 1.0, speed=0.0, offset=0.5)
    cfg = ControllerConfig()
    c = cfg.constraints
    sol = ContouringMPC(circle_path).solve(Belief.certain(z), EXACT, PCOV, 1.0, 3.4)
    assert np.all(sol.inputs[:, 0] <= c.v_cmd_max + 1e-9)
    assert np.all(sol.inputs[:, 0] >= c.v_cmd_min - 1e-9)
    assert np.all(np.abs(sol.inputs[:, 1]) <= c.omega_cmd_max + 1e-9)
    assert np.all(sol.v_ref <= c.v_ref_max + 1e-9) and np.all(sol.v_ref >= -1e-9)


def test_non_finite_model_rejected(straight_path):
    mpc = ContouringMPC(straight_path)
    bad = ActuatorParams(np.array([math.nan, -1.0]), np.array([1.0, -1.0]))
    with pytest.raises(MPCError):
        mpc.solve(Belief.certain(start_state(straight_path)), bad, np.zeros((4, 4)), 0.0, 2.0)
    with pytest.raises(MPCError):
        mpc.solve(Belief.certain(start_state(straight_path)), EXACT,
                  np.full((4, 4), np.inf), 0.0, 2.0)


def test_solution_states_follow_dynamics(circle_path):
    z = start_state(circle_path, 5.0, offset=-0.4)
    sol = ContouringMPC(circle_path).solve(Belief.certain(z), EXACT, PCOV * 0.1, 5.0, 2.0)
    for k in range(30):
        ref = oracles.unicycle_step(sol.states[k], sol.inputs[k], EXACT.stacked(), 0.1)
        assert np.allclose(sol.states[k + 1][[0, 1, 3, 4]], ref[[0, 1, 3, 4]], atol=1e-10)
