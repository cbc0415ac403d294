"""Chance-constrained contouring tube MPC solved by Gauss-Newton SQP.

Decision variables per step are the commands ``u_k = [v_cmd, omega_cmd]`` and
the virtual reference speed ``v_ref_k`` that advances the path progress
``s_{k+1} = s_k + dt * v_ref_k``.  States are eliminated with the
linearised sensitivities; after each QP the inputs are rolled through the
nonlinear model, so the returned states satisfy the mean dynamics exactly.

Each pass: roll out mean and covariance along the current guess,
linearise residuals and constraints, solve the QP in the input increments
(with per-step slack on the tightened contour constraint), take the full
step inside a per-pass trust region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..belief import Belief, param_cov, process_noise
from ..config import ControllerConfig
from ..path import Path
from ..vehicle import ActuatorParams, wrap_angle
from ..wblr import NigPosterior, noise_variance
from .contour import tightened_input_bounds
from .qp import QPError, solve_qp

log = logging.getLogger(__name__)


class MPCError(RuntimeError):
    pass


@dataclass
class SolveDiagnostics:
    qp_iterations: list = field(default_factory=list)
    kkt_residuals: list = field(default_factory=list)
    kkt_scaled: list = field(default_factory=list)
    qp_objectives: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    trust_active: list = field(default_factory=list)
    slack_max: float = 0.0
    clamped: bool = False
    dynamics_defect: float = 0.0


@dataclass
class HorizonSolution:
    inputs: np.ndarray      # (N, 2)
    v_ref: np.ndarray       # (N,)
    states: np.ndarray      # (N+1, 5), states[0] is the initial mean
    s_ref: np.ndarray       # (N+1,)
    covs: np.ndarray        # (N+1, 5, 5)
    contour: np.ndarray     # (N,) predicted contour error at steps 1..N
    contour_std: np.ndarray  # (N,)
    diagnostics: SolveDiagnostics

    @property
    def u0(self) -> np.ndarray:
        return self.inputs[0].copy()

    def shifted(self):
        """Warm start for the next step: drop the first input, repeat the last."""
        U = np.vstack([self.inputs[1:], self.inputs[-1:]])
        V = np.concatenate([self.v_ref[1:], self.v_ref[-1:]])
        return U, V


def _steady_ratio(w_cmd: float, w_state: float) -> float:
    """Command per unit of held actuator state under ``cmd*w_cmd + state*w_state = 0``."""
    if abs(w_cmd) < 1e-6:
        return 1.0
    r = -w_state / w_cmd
    return r if 0.1 <= r <= 10.0 else 1.0


class ContouringMPC:
    """One controller instance per vehicle; not thread-safe."""

    def __init__(self, path: Path, config: ControllerConfig | None = None):
        self.path = path
        self.cfg = config or ControllerConfig()
        N = self.cfg.horizon
        dt = self.cfg.dt
        self.N = N
        # ds_k / dv_ref_j for k = 1..N (rows) and j = 0..N-1
        self.T = dt * np.tril(np.ones((N, N)))
        D = np.eye(N) - np.eye(N, k=-1)
        self.D = D
        w = self.cfg.weights
        self._sw_stage = np.sqrt([w.lag, w.contour, w.heading, w.speed, w.turn])
        self._sw_input = np.sqrt([w.v_cmd, w.omega_cmd, w.v_ref])
        self._sw_rate = np.sqrt([w.rate_v_cmd, w.rate_omega_cmd, w.rate_v_ref])

    # ------------------------------------------------------------------
    def initial_guess(self, s0: float, desired_speed: float, params: ActuatorParams):
        N, dt = self.N, self.cfg.dt
        s = s0 + dt * desired_speed * np.arange(N)
        kappa = self.path.raw(s)[:, 6]
        w = params.stacked()
        U = np.empty((N, 2))
        U[:, 0] = _steady_ratio(w[0], w[1]) * desired_speed
        U[:, 1] = _steady_ratio(w[2], w[3]) * kappa * desired_speed
        c = self.cfg.constraints
        U[:, 0] = np.clip(U[:, 0], c.v_cmd_min, c.v_cmd_max)
        U[:, 1] = np.clip(U[:, 1], c.omega_cmd_min, c.omega_cmd_max)
        V = np.full(N, np.clip(desired_speed, c.v_ref_min, c.v_ref_max))
        return U, V

    # ------------------------------------------------------------------
    def _evaluate(self, ctx, U, V, jac: bool):
        cfg = self.cfg
        N, dt = self.N, cfg.dt
        w = ctx["w"]
        U = np.ascontiguousarray(U)
        if jac:
            Z, covs, S = kernels.horizon(ctx["z0"], U, w, ctx["w_cov"], ctx["q"], dt,
                                         cfg.k_v, cfg.k_theta, cfg.closed_loop_covariance,
                                         ctx["cov0"])
        else:
            Z = kernels.rollout(ctx["z0"], U, w, dt)
            covs = kernels.propagate_cov(Z, U, w, ctx["w_cov"], ctx["q"], dt, cfg.k_v,
                                         cfg.k_theta, cfg.closed_loop_covariance, ctx["cov0"])
            S = None
        s_raw = ctx["s0"] + np.concatenate([[0.0], np.cumsum(dt * V)])
        s = np.clip(s_raw, 0.0, self.path.length)
        clamped = bool(np.any(s != s_raw))
        fr = self.path.raw(s)
        pos, t, n = fr[:, 0:2], fr[:, 2:4], fr[:, 4:6]
        kappa, speed, psi, dkappa = fr[:, 6], fr[:, 7], fr[:, 8], fr[:, 9]
        inside = (s_raw > 0.0) & (s_raw < self.path.length)

        d = Z[1:, :2] - pos[1:]
        lag = np.einsum("ij,ij->i", t[1:], d)
        con = np.einsum("ij,ij->i", n[1:], d)
        head = wrap_angle(Z[1:, 2] - psi[1:])
        v_err = Z[1:, 3] - V
        w_err = Z[1:, 4] - kappa[1:] * V

        vd = ctx["v_des"]
        r_in = np.column_stack([U[:, 0] - ctx["ratio_v"] * vd,
                                U[:, 1] - ctx["ratio_w"] * kappa[:-1] * vd,
                                V - vd])
        U_full = np.vstack([ctx["u_prev"], U])
        V_full = np.concatenate([[ctx["v_prev"]], V])
        r_rate = np.column_stack([np.diff(U_full, axis=0), np.diff(V_full)])

        sigma_n = np.sqrt(np.maximum(np.einsum("ki,kij,kj->k", n[1:], covs[1:, :2, :2], n[1:]),
                                     0.0))
        out = dict(Z=Z, covs=covs, s=s, clamped=clamped, lag=lag, con=con, sigma_n=sigma_n)

        r_stage = np.column_stack([lag, con, head, v_err, w_err])
        res = np.concatenate([(r_stage * self._sw_stage).ravel(),
                              (r_in * self._sw_input).ravel(),
                              (r_rate * self._sw_rate).ravel()])
        out["res"] = res
        if not jac:
            return out

        nu = 2 * N
        nv = N + nu
        # stage Jacobians: rows ordered (k, component)
        S1 = S[1:]
        ds_gate = inside[1:].astype(float)
        spd = speed[1:]
        k1 = kappa[1:]
        dl_ds = (k1 * spd * con - spd) * ds_gate
        dc_ds = -k1 * spd * lag * ds_gate
        dh_ds = -k1 * spd * ds_gate
        dw_ds = -dkappa[1:] * V * ds_gate
        T = self.T
        Js = np.zeros((N, 5, nv))
        Js[:, 0, :nu] = t[1:, 0, None] * S1[:, 0, :] + t[1:, 1, None] * S1[:, 1, :]
        Js[:, 0, nu:] = dl_ds[:, None] * T
        Js[:, 1, :nu] = n[1:, 0, None] * S1[:, 0, :] + n[1:, 1, None] * S1[:, 1, :]
        Js[:, 1, nu:] = dc_ds[:, None] * T
        Js[:, 2, :nu] = S1[:, 2, :]
        Js[:, 2, nu:] = dh_ds[:, None] * T
        Js[:, 3, :nu] = S1[:, 3, :]
        Js[:, 3, nu:] = -np.eye(N)
        Js[:, 4, :nu] = S1[:, 4, :]
        Js[:, 4, nu:] = dw_ds[:, None] * T - np.diag(k1)
        contour_rows = Js[:, 1, :].copy()
        Js *= self._sw_stage[None, :, None]

        Ji = np.zeros((N, 3, nv))
        idx = np.arange(N)
        Ji[idx, 0, 2 * idx] = 1.0
        Ji[idx, 1, 2 * idx + 1] = 1.0
        # omega_cmd reference depends on s_k (k >= 1)
        gate0 = inside[:-1].astype(float)
        coef = -ctx["ratio_w"] * dkappa[:-1] * vd * gate0
        Ji[1:, 1, nu:] = coef[1:, None] * T[:-1]
        Ji[idx, 2, nu + idx] = 1.0
        Ji *= self._sw_input[None, :, None]

        Jr = np.zeros((N, 3, nv))
        Dm = self.D
        Jr[:, 0, 0:nu:2] = Dm
        Jr[:, 1, 1:nu:2] = Dm
        Jr[:, 2, nu:] = Dm
        Jr *= self._sw_rate[None, :, None]

        out["J"] = np.concatenate([Js.reshape(5 * N, nv), Ji.reshape(3 * N, nv),
                                   Jr.reshape(3 * N, nv)])
        out["contour_rows"] = contour_rows
        return out

    def _slack_cost(self, viol):
        sl = np.maximum(viol, 0.0)
        return float(self.cfg.slack_linear * sl.sum() + self.cfg.slack_quadratic * (sl @ sl))

    def _cost(self, ev):
        c = self.cfg.constraints
        viol = np.abs(ev["con"]) + c.r_c * ev["sigma_n"] - c.e_c_max
        return float(ev["res"] @ ev["res"]) + self._slack_cost(viol)

    # ------------------------------------------------------------------
    def solve(self, belief: Belief, params: ActuatorParams, pcov, s0: float,
              desired_speed: float, u_prev=None, v_prev: float | None = None,
              warm=None) -> HorizonSolution:
        """Solve the horizon problem from ``belief``.

        ``params`` carries the mean actuator parameters and the noise
        variances used for Q; ``pcov`` is the 4x4 parameter covariance.
        ``warm`` is an ``(inputs, v_ref)`` pair, typically ``prev.shifted()``.
        """
        cfg = self.cfg
        c = cfg.constraints
        N, dt = self.N, cfg.dt
        w = params.stacked()
        pcov = np.asarray(pcov, dtype=float)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(pcov))
                and np.isfinite(params.sigma2_v) and np.isfinite(params.sigma2_omega)):
            raise MPCError("non-finite model")
        if not np.all(np.isfinite(belief.mean)):
            raise MPCError("non-finite initial state")
        if warm is None:
            U, V = self.initial_guess(s0, desired_speed, params)
        else:
            U = np.array(warm[0], dtype=float).reshape(N, 2)
            V = np.array(warm[1], dtype=float).reshape(N)
        if u_prev is None:
            u_prev = U[0]
        if v_prev is None:
            v_prev = V[0]
        ctx = dict(
            z0=np.ascontiguousarray(belief.mean), cov0=np.ascontiguousarray(belief.cov),
            w=np.ascontiguousarray(w), w_cov=np.ascontiguousarray(pcov),
            q=process_noise(params.sigma2_v, params.sigma2_omega, dt),
            s0=float(s0), v_des=float(desired_speed),
            ratio_v=_steady_ratio(w[0], w[1]), ratio_w=_steady_ratio(w[2], w[3]),
            u_prev=np.asarray(u_prev, dtype=float), v_prev=float(v_prev),
        )
        diag = SolveDiagnostics()
        nu, nv = 2 * N, 3 * N
        rho_q = cfg.slack_quadratic
        rho_l = cfg.slack_linear
        trust = np.concatenate([np.tile([cfg.trust_speed, cfg.trust_turn], N),
                                np.full(N, cfg.trust_speed)])

        for _ in range(cfg.sqp_passes):
            ev = self._evaluate(ctx, U, V, jac=True)
            diag.costs.append(self._cost(ev))
            J, res = ev["J"], ev["res"]
            H = np.zeros((nv + N, nv + N))
            H[:nv, :nv] = 2.0 * (J.T @ J)
            H[nv:, nv:] = 2.0 * rho_q * np.eye(N)
            g = np.concatenate([2.0 * (J.T @ res), np.full(N, rho_l)])

            # input boxes, tightened by the ancillary-error std at each step
            covs = ev["covs"]
            sig_v = np.sqrt(np.maximum(covs[:N, 3, 3], 0.0))
            sig_th = np.sqrt(np.maximum(covs[:N, 2, 2], 0.0))
            lo_v, hi_v = tightened_input_bounds(c.v_cmd_min, c.v_cmd_max, cfg.k_v, sig_v,
                                                c.r_v_cmd)
            lo_w, hi_w = tightened_input_bounds(c.omega_cmd_min, c.omega_cmd_max, cfg.k_theta,
                                                sig_th, c.r_omega_cmd)
            abs_lo = np.concatenate([np.column_stack([lo_v, lo_w]).ravel(),
                                     np.full(N, c.v_ref_min)])
            abs_hi = np.concatenate([np.column_stack([hi_v, hi_w]).ravel(),
                                     np.full(N, c.v_ref_max)])
            cur = np.concatenate([U.ravel(), V])
            lo = np.maximum(abs_lo - cur, -trust)
            hi = np.minimum(abs_hi - cur, trust)
            bad = lo > hi
            # box unreachable within the trust region: move as far as allowed toward it
            lo[bad] = hi[bad] = np.where(abs_hi[bad] - cur[bad] < -trust[bad], -trust[bad],
                                         trust[bad])
            lb = np.concatenate([lo, np.zeros(N)])
            ub = np.concatenate([hi, np.full(N, np.inf)])

            # |e_c + J dx| + r_c sigma - e_max <= slack
            Jc = ev["contour_rows"]
            tight = c.e_c_max - c.r_c * ev["sigma_n"]
            C = np.zeros((2 * N, nv + N))
            C[:N, :nv] = Jc
            C[N:, :nv] = -Jc
            C[:N, nv:] = -np.eye(N)
            C[N:, nv:] = -np.eye(N)
            dvec = np.concatenate([tight - ev["con"], tight + ev["con"]])

            # feasible start: clipped unconstrained step, slack covering any violation
            try:
                dx0 = np.linalg.solve(H[:nv, :nv], -g[:nv])
            except np.linalg.LinAlgError:
                dx0 = np.zeros(nv)
            dx0 = np.clip(dx0, lo, hi)
            sl0 = np.maximum(np.maximum(Jc @ dx0 - dvec[:N], -Jc @ dx0 - dvec[N:]), 0.0)
            x0 = np.concatenate([dx0, sl0])
            hint = np.concatenate([(dx0 <= lo) | (dx0 >= hi), sl0 <= 0.0])
            try:
                qp = solve_qp(H, g, lb, ub, C, dvec, x0, fixed_hint=hint)
            except QPError as exc:
                raise MPCError(f"QP failed: {exc}") from exc
            diag.qp_iterations.append(qp.iterations)
            diag.kkt_residuals.append(qp.kkt_residual)
            diag.kkt_scaled.append(qp.kkt_scaled)
            diag.qp_objectives.append(qp.objective)
            dx = qp.x[:nv]
            diag.trust_active.append(bool(np.any(np.isclose(np.abs(dx), trust, rtol=0, atol=1e-12))))
            diag.slack_max = max(diag.slack_max, float(qp.x[nv:].max(initial=0.0)))
            U = U + dx[:nu].reshape(N, 2)
            V = V + dx[nu:]

        ev = self._evaluate(ctx, U, V, jac=False)
        diag.costs.append(self._cost(ev))
        diag.clamped = ev["clamped"]
        if diag.clamped:
            log.debug("reference progress clamped at path end")
        Z = ev["Z"]
        defect = 0.0
        for k in range(N):
            step = kernels.step_mean(Z[k], U[k], ctx["w"], dt)
            defect = max(defect, float(np.max(np.abs(step - Z[k + 1]))))
        diag.dynamics_defect = defect
        return HorizonSolution(U, V, Z, ev["s"], ev["covs"], ev["con"], ev["sigma_n"], diag)

    def solve_with_models(self, belief: Belief, model_v: NigPosterior, model_omega: NigPosterior,
                          s0: float, desired_speed: float, **kwargs) -> HorizonSolution:
        params = ActuatorParams(model_v.w_mean.copy(), model_omega.w_mean.copy(),
                                noise_variance(model_v), noise_variance(model_omega))
        return self.solve(belief, params, param_cov(model_v, model_omega), s0, desired_speed,
                          **kwargs)
