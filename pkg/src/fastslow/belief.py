"""Gaussian belief propagation over the prediction horizon.

The mean follows the nominal dynamics.  The covariance uses the EKF form
``A P A^T + Q`` with ``A = [A_z, A_w]`` and ``P = blockdiag(cov_zz, cov_ww)``;
model parameters are held at their posterior estimate over the horizon, so
their covariance enters each step but no cross-covariance is carried.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from . import kernels
from .vehicle import DT, ActuatorParams, AncillaryGains
from .wblr import NigPosterior, noise_variance

PSD_TOL = 1e-10


class BeliefError(ValueError):
    pass


def _check_psd(m, what):
    if not np.all(np.isfinite(m)):
        raise BeliefError(f"{what} is not finite")
    if not np.allclose(m, m.T, rtol=1e-9, atol=1e-12):
        raise BeliefError(f"{what} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (m + m.T)).min() < -PSD_TOL:
        raise BeliefError(f"{what} is not positive semi-definite")


@dataclass(frozen=True)
class Belief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(kernels.NX)
        cov = np.array(self.cov, dtype=float).reshape(kernels.NX, kernels.NX)
        _check_psd(cov, "state covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def certain(cls, mean) -> "Belief":
        return cls(mean, np.zeros((kernels.NX, kernels.NX)))


def param_cov(model_v: NigPosterior, model_omega: NigPosterior) -> np.ndarray:
    """Block-diagonal 4x4 covariance of stacked parameters, (b/a) V per channel."""
    return block_diag((model_v.b / model_v.a) * model_v.V,
                      (model_omega.b / model_omega.a) * model_omega.V)


def process_noise(sigma2_v: float, sigma2_omega: float, dt: float = DT) -> np.ndarray:
    """Diagonal of Q: zero on the pose rows, dt^2 sigma^2 on the actuator rows."""
    return np.array([0.0, 0.0, 0.0, dt * dt * sigma2_v, dt * dt * sigma2_omega])


def process_noise_from_models(model_v: NigPosterior, model_omega: NigPosterior,
                              dt: float = DT) -> np.ndarray:
    return process_noise(noise_variance(model_v), noise_variance(model_omega), dt)


def propagate(b: Belief, u, params: ActuatorParams, pcov: np.ndarray,
              gains: AncillaryGains | None = None, dt: float = DT,
              closed_loop: bool = True) -> Belief:
    """One EKF prediction step.  ``params.sigma2_*`` supply the process noise."""
    gains = gains or AncillaryGains()
    pcov = np.asarray(pcov, dtype=float)
    _check_psd(pcov, "parameter covariance")
    u = np.asarray(u, dtype=float).reshape(1, kernels.NU)
    Z = kernels.rollout(b.mean, u, params.stacked(), float(dt))
    q = process_noise(params.sigma2_v, params.sigma2_omega, dt)
    covs = kernels.propagate_cov(Z, u, params.stacked(), pcov, q, float(dt),
                                 float(gains.k_v), float(gains.k_theta), bool(closed_loop), b.cov)
    return Belief(Z[1], covs[1])


def propagate_horizon(b: Belief, U, params: ActuatorParams, pcov: np.ndarray,
                      gains: AncillaryGains | None = None, dt: float = DT,
                      closed_loop: bool = True):
    """Means (n+1, 5) and covariances (n+1, 5, 5) along an input sequence."""
    gains = gains or AncillaryGains()
    U = np.ascontiguousarray(np.atleast_2d(np.asarray(U, dtype=float)))
    Z = kernels.rollout(b.mean, U, params.stacked(), float(dt))
    q = process_noise(params.sigma2_v, params.sigma2_omega, dt)
    covs = kernels.propagate_cov(Z, U, params.stacked(), np.asarray(pcov, dtype=float), q,
                                 float(dt), float(gains.k_v), float(gains.k_theta),
                                 bool(closed_loop), b.cov)
    return Z, covs


def directional_std(b: Belief | np.ndarray, direction) -> float:
    """Standard deviation of the position error along a unit direction in the plane."""
    cov = b.cov if isinstance(b, Belief) else np.asarray(b, dtype=float)
    d = np.asarray(direction, dtype=float)
    q = float(d @ cov[:2, :2] @ d)
    return float(np.sqrt(max(q, 0.0)))
