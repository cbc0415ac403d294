"""Hot loops over the prediction horizon.

State layout ``z = [x, y, theta, v, omega]``, input ``u = [v_cmd, omega_cmd]``,
stacked actuator parameters ``w = [w_v0, w_v1, w_w0, w_w1]``.
All functions are numba-compiled unless FASTSLOW_DISABLE_NUMBA is set.
"""

import math

import numpy as np

from ._accel import njit

NX = 5
NU = 2
NW = 4


@njit
def step_mean(z, u, w, dt):
    out = np.empty(NX)
    c = math.cos(z[2])
    s = math.sin(z[2])
    out[0] = z[0] + dt * z[3] * c
    out[1] = z[1] + dt * z[3] * s
    out[2] = z[2] + dt * z[4]
    out[3] = z[3] + dt * (w[0] * u[0] + w[1] * z[3])
    out[4] = z[4] + dt * (w[2] * u[1] + w[3] * z[4])
    return out


@njit
def jacobians(z, u, w, dt, k_v, k_theta, closed_loop):
    """``(A_z, A_w)`` of ``step_mean``; the closed-loop variant folds in the ancillary law."""
    Az = np.eye(NX)
    Aw = np.zeros((NX, NW))
    c = math.cos(z[2])
    s = math.sin(z[2])
    Az[0, 2] = -dt * z[3] * s
    Az[0, 3] = dt * c
    Az[1, 2] = dt * z[3] * c
    Az[1, 3] = dt * s
    Az[2, 4] = dt
    Az[3, 3] = 1.0 + dt * w[1]
    Az[4, 4] = 1.0 + dt * w[3]
    if closed_loop:
        Az[3, 3] += dt * k_v * w[0]
        Az[4, 2] += dt * k_theta * w[2]
    Aw[3, 0] = dt * u[0]
    Aw[3, 1] = dt * z[3]
    Aw[4, 2] = dt * u[1]
    Aw[4, 3] = dt * z[4]
    return Az, Aw


@njit
def input_jacobian(w, dt):
    B = np.zeros((NX, NU))
    B[3, 0] = dt * w[0]
    B[4, 1] = dt * w[2]
    return B


@njit
def rollout(z0, U, w, dt):
    n = U.shape[0]
    Z = np.empty((n + 1, NX))
    Z[0] = z0
    for k in range(n):
        Z[k + 1] = step_mean(Z[k], U[k], w, dt)
    return Z


@njit
def propagate_cov(Z, U, w, w_cov, q_diag, dt, k_v, k_theta, closed_loop, cov0):
    """EKF covariance along a nominal trajectory, parameters held fixed.

    ``cov_{k+1} = A_z cov_k A_z^T + A_w w_cov A_w^T + Q`` with no state/parameter
    cross-covariance carried between steps.
    """
    n = U.shape[0]
    covs = np.empty((n + 1, NX, NX))
    covs[0] = cov0
    for k in range(n):
        Az, Aw = jacobians(Z[k], U[k], w, dt, k_v, k_theta, closed_loop)
        P = Az @ covs[k] @ Az.T + Aw @ w_cov @ Aw.T
        for i in range(NX):
            P[i, i] += q_diag[i]
        covs[k + 1] = 0.5 * (P + P.T)
    return covs


@njit
def sensitivities(Z, U, w, dt):
    """``dZ[k] / dU`` for the open-loop mean dynamics, shape (n+1, 5, 2n)."""
    n = U.shape[0]
    S = np.zeros((n + 1, NX, NU * n))
    B = input_jacobian(w, dt)
    for k in range(n):
        Az, _ = jacobians(Z[k], U[k], w, dt, 0.0, 0.0, False)
        # only columns of earlier inputs are non-zero
        m = NU * k
        if m > 0:
            S[k + 1, :, :m] = Az @ np.ascontiguousarray(S[k, :, :m])
        S[k + 1, :, m:m + NU] = B
    return S


@njit
def horizon(z0, U, w, w_cov, q_diag, dt, k_v, k_theta, closed_loop, cov0):
    Z = rollout(z0, U, w, dt)
    covs = propagate_cov(Z, U, w, w_cov, q_diag, dt, k_v, k_theta, closed_loop, cov0)
    S = sensitivities(Z, U, w, dt)
    return Z, covs, S
