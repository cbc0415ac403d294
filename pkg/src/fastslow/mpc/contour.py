"""Contouring error model and chance-constraint tightening."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..belief import Belief, directional_std
from ..config import ChanceConstraintConfig
from ..path import Path
from ..vehicle import wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceProgress:
    s_ref: float
    v_ref: float


@dataclass(frozen=True)
class ContourErrors:
    """Tracking errors against the path point at ``s_ref``.

    ``contour`` is positive when the vehicle is left of the path (left-hand
    normal); ``lag`` is positive when the vehicle is ahead of the reference.
    """

    lag: float
    contour: float
    heading_err: float
    speed_err: float
    turn_err: float
    clamped: bool = False


def contour_errors(z, path: Path, progress: ReferenceProgress) -> ContourErrors:
    z = np.asarray(z.to_array() if hasattr(z, "to_array") else z, dtype=float)
    fr = path.frames(progress.s_ref)
    if fr.clamped:
        log.warning("s_ref %.3f outside [0, %.3f], clamped", progress.s_ref, path.length)
    d = z[:2] - fr.position[0]
    return ContourErrors(
        lag=float(fr.tangent[0] @ d),
        contour=float(fr.normal[0] @ d),
        heading_err=wrap_angle(z[2] - fr.heading[0]),
        speed_err=float(z[3] - progress.v_ref),
        turn_err=float(z[4] - fr.curvature[0] * progress.v_ref),
        clamped=fr.clamped,
    )


def tighten_state_constraint(e_c: float, belief: Belief, normal,
                             cfg: ChanceConstraintConfig) -> float:
    """Residual ``e_c + r_c * std_normal - e_c_max``; satisfied when <= 0."""
    return float(e_c + cfg.r_c * directional_std(belief, normal) - cfg.e_c_max)


def tighten_input_constraint(u_i: float, gain: float, sigma_e: float, r: float,
                             bound: float) -> float:
    """Residual ``u_i + r |K| sigma_e - bound`` of an upper input bound; satisfied when <= 0."""
    if sigma_e < 0:
        raise ValueError("sigma_e must be >= 0")
    return float(u_i + r * abs(gain) * sigma_e - bound)


def tightened_input_bounds(lo: float, hi: float, gain: float, sigma_e, r: float):
    """Input box shrunk by ``r |K| sigma_e`` on both sides.

    A box that would invert collapses to its midpoint.
    """
    margin = r * abs(gain) * np.asarray(sigma_e, dtype=float)
    lo_t = lo + margin
    hi_t = hi - margin
    mid = 0.5 * (lo + hi)
    bad = lo_t > hi_t
    lo_t = np.where(bad, mid, lo_t)
    hi_t = np.where(bad, mid, hi_t)
    return lo_t, hi_t
