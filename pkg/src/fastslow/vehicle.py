"""Unicycle with learned first-order actuator dynamics.

Pose ``s = [x, y, theta]`` follows Euler-discretised unicycle kinematics;
the actuator state ``xi = [v, omega]`` follows

    v'     = v     + dt * ([v_cmd, v] @ w_v)
    omega' = omega + dt * ([omega_cmd, omega] @ w_omega)

which is affine in (u, xi) for fixed parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .wblr import NigPosterior, noise_variance

DT = 0.1


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class FullState:
    x: float
    y: float
    theta: float
    v: float
    omega: float

    def __post_init__(self):
        vals = (self.x, self.y, self.theta, self.v, self.omega)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite state")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v, self.omega])

    @classmethod
    def from_array(cls, z) -> "FullState":
        return cls(*(float(v) for v in z))


@dataclass(frozen=True)
class ControlInput:
    v_cmd: float
    omega_cmd: float

    def to_array(self) -> np.ndarray:
        return np.array([self.v_cmd, self.omega_cmd])


@dataclass(frozen=True)
class ActuatorParams:
    w_v: np.ndarray
    w_omega: np.ndarray
    sigma2_v: float = 0.0
    sigma2_omega: float = 0.0

    def stacked(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.w_v, float), np.asarray(self.w_omega, float)])

    @classmethod
    def from_models(cls, model_v: NigPosterior, model_omega: NigPosterior) -> "ActuatorParams":
        return cls(model_v.w_mean.copy(), model_omega.w_mean.copy(),
                   noise_variance(model_v), noise_variance(model_omega))

    @classmethod
    def first_order(cls, tau_v: float, tau_omega: float, sigma2_v: float = 0.0,
                    sigma2_omega: float = 0.0) -> "ActuatorParams":
        return cls(np.array([1.0 / tau_v, -1.0 / tau_v]),
                   np.array([1.0 / tau_omega, -1.0 / tau_omega]), sigma2_v, sigma2_omega)


@dataclass(frozen=True)
class AncillaryGains:
    k_v: float = -5.0
    k_theta: float = -5.0


def _arr(z):
    return z.to_array() if hasattr(z, "to_array") else np.asarray(z, dtype=float)


def step_mean(z, u, p: ActuatorParams, dt: float = DT) -> np.ndarray:
    """Noise-free one-step prediction; heading of the result is wrapped."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = kernels.step_mean(_arr(z), _arr(u), p.stacked(), float(dt))
    out[2] = wrap_angle(out[2])
    return out


def jacobians(z, u, p: ActuatorParams, dt: float = DT, gains: AncillaryGains | None = None,
              closed_loop: bool = False):
    """``(A_z [5x5], A_w [5x4])``.

    With ``closed_loop`` the ancillary law ``v_cmd += K_v e_v``,
    ``omega_cmd += K_theta e_theta`` is folded into the actuator rows.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    gains = gains or AncillaryGains()
    return kernels.jacobians(_arr(z), _arr(u), p.stacked(), float(dt),
                             float(gains.k_v), float(gains.k_theta), bool(closed_loop))


def feature_and_target(xi_k, u_k, xi_next, dt: float = DT):
    """Regression pairs ``((x_v, g_v), (x_omega, g_omega))`` from one observed step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    xi_k = np.asarray(xi_k, dtype=float)
    u_k = np.asarray(u_k, dtype=float)
    xi_next = np.asarray(xi_next, dtype=float)
    g = (xi_next - xi_k) / dt
    return ((np.array([u_k[0], xi_k[0]]), float(g[0])),
            (np.array([u_k[1], xi_k[1]]), float(g[1])))
