"""Weighted Bayesian linear regression with a Normal-Inverse-Gamma prior.

Each output channel is modelled as ``g = w^T x + eta`` with
``eta ~ N(0, sigma^2)``.  Sample ``i`` enters the likelihood raised to the
power ``l_i`` in [0, 1], so the weighted update stays conjugate and the
posterior is again NIG(w_N, V_N, a_N, b_N).

Posteriors are immutable; every operation returns a new one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from ._accel import njit

B_FLOOR = 1e-12


class PosteriorError(ValueError):
    """Invalid posterior parameters or data for an NIG update."""


@dataclass(frozen=True)
class NigPosterior:
    """NIG(w_mean, V, a, b): w | s2 ~ N(w_mean, s2 V), s2 ~ IG(a, b)."""

    w_mean: np.ndarray
    V: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        w = np.array(self.w_mean, dtype=float).reshape(-1)
        V = np.array(self.V, dtype=float).reshape(w.size, w.size)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(V))):
            raise PosteriorError("non-finite posterior parameters")
        if not (math.isfinite(self.a) and math.isfinite(self.b)) or self.a <= 0 or self.b <= 0:
            raise PosteriorError(f"need a > 0 and b > 0, got a={self.a}, b={self.b}")
        if not np.allclose(V, V.T, rtol=1e-10, atol=1e-14):
            raise PosteriorError("V is not symmetric")
        try:
            np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise PosteriorError("V is not positive definite") from exc
        w.flags.writeable = False
        V.flags.writeable = False
        object.__setattr__(self, "w_mean", w)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.w_mean.size

    def to_record(self) -> list[float]:
        """Flat ``[w..., V row-major..., a, b]``."""
        return [*self.w_mean.tolist(), *self.V.reshape(-1).tolist(), self.a, self.b]

    @classmethod
    def from_record(cls, values: Sequence[float], dim: int) -> "NigPosterior":
        values = [float(v) for v in values]
        if len(values) != dim + dim * dim + 2:
            raise PosteriorError(f"record length {len(values)} does not match dim {dim}")
        w = np.array(values[:dim])
        V = np.array(values[dim:dim + dim * dim]).reshape(dim, dim)
        return cls(w, V, values[-2], values[-1])

    def __eq__(self, other):
        if not isinstance(other, NigPosterior):
            return NotImplemented
        return (self.a == other.a and self.b == other.b
                and np.array_equal(self.w_mean, other.w_mean)
                and np.array_equal(self.V, other.V))

    __hash__ = None


@dataclass(frozen=True)
class WeightedSample:
    x: np.ndarray
    g: float
    weight: float = 1.0

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "g", float(self.g))
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True)
class PosteriorMarginals:
    """Marginals of an NIG posterior.

    ``w ~ T(w_mean, w_scale, dof)`` and ``s2 ~ IG(a, b)``.  ``sigma2_mean`` is
    NaN (and ``sigma2_mean_defined`` False) when ``a <= 1``.
    """

    w_mean: np.ndarray
    w_scale: np.ndarray
    dof: float
    sigma2_mean: float
    sigma2_mode: float
    sigma2_mean_defined: bool = field(default=True)


@dataclass(frozen=True)
class Prediction:
    """Student-t posterior predictive at one feature vector.

    ``variance`` is the squared scale of the t distribution; as ``dof`` grows
    it is also the Gaussian-approximation variance.
    """

    mean: float
    variance: float
    dof: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def gaussian(self) -> tuple[float, float]:
        return self.mean, self.variance


def default_prior(tau: float = 0.5, sigma2: float = 0.25, a0: float = 2.0,
                  v0_scale: float = 1.0) -> NigPosterior:
    """Stable first-order-lag prior ``xi_dot = (u - xi) / tau`` for one actuator channel."""
    return NigPosterior(np.array([1.0 / tau, -1.0 / tau]), v0_scale * np.eye(2), a0, a0 * sigma2)


# --------------------------------------------------------------------------
# update kernels (numba-compatible)
# --------------------------------------------------------------------------

@njit
def _nig_update_kernel(w0, V0, a0, b0, xtlx, xtlg, gtlg, trace_l):
    d = w0.shape[0]
    eye = np.eye(d)
    c0 = np.linalg.cholesky(V0)
    c0_inv = np.linalg.solve(c0, eye)
    prec0 = c0_inv.T @ c0_inv
    prec_n = prec0 + xtlx
    prec_n = 0.5 * (prec_n + prec_n.T)
    cn = np.linalg.cholesky(prec_n)
    cn_inv = np.linalg.solve(cn, eye)
    V_n = cn_inv.T @ cn_inv
    V_n = 0.5 * (V_n + V_n.T)
    rhs = prec0 @ w0 + xtlg
    w_n = V_n @ rhs
    # one refinement pass against the accumulated precision
    w_n = w_n + V_n @ (rhs - prec_n @ w_n)
    a_n = a0 + 0.5 * trace_l
    b_n = b0 + 0.5 * (w0 @ (prec0 @ w0) + gtlg - w_n @ (prec_n @ w_n))
    return w_n, V_n, a_n, b_n


def _check_data(X, g, weights, dim):
    if X.ndim != 2 or X.shape[1] != dim:
        raise PosteriorError(f"features must have shape (n, {dim}), got {X.shape}")
    if g.shape != (X.shape[0],) or weights.shape != (X.shape[0],):
        raise PosteriorError("features, targets and weights have inconsistent lengths")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(g)) and np.all(np.isfinite(weights))):
        raise PosteriorError("non-finite sample")
    if np.any(weights < 0.0) or np.any(weights > 1.0):
        raise PosteriorError("weights must lie in [0, 1]")


def nig_update_stats(prior: NigPosterior, xtlx: np.ndarray, xtlg: np.ndarray,
                     gtlg: float, trace_l: float) -> NigPosterior:
    """NIG update from weighted sufficient statistics ``X^T L X, X^T L g, g^T L g, tr L``."""
    if trace_l == 0.0:
        return prior
    try:
        w_n, V_n, a_n, b_n = _nig_update_kernel(
            prior.w_mean, prior.V, prior.a, prior.b,
            np.ascontiguousarray(xtlx, dtype=float), np.ascontiguousarray(xtlg, dtype=float),
            float(gtlg), float(trace_l))
    except np.linalg.LinAlgError as exc:
        raise PosteriorError("posterior precision lost positive-definiteness") from exc
    return NigPosterior(w_n, V_n, a_n, max(b_n, B_FLOOR))


def weighted_stats(X: np.ndarray, g: np.ndarray, weights: np.ndarray):
    Xl = X * weights[:, None]
    return Xl.T @ X, Xl.T @ g, float(np.dot(weights * g, g)), float(weights.sum())


def nig_update_arrays(prior: NigPosterior, X, g, weights=None) -> NigPosterior:
    """Weighted NIG update on stacked data (rows of ``X`` are feature vectors)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = np.asarray(g, dtype=float).reshape(-1)
    if X.size == 0:
        return prior
    weights = np.ones(g.shape) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    _check_data(X, g, weights, prior.dim)
    return nig_update_stats(prior, *weighted_stats(X, g, weights))


def nig_update(prior: NigPosterior, data: Iterable[WeightedSample]) -> NigPosterior:
    """Posterior of ``prior`` after the weighted samples ``data``; empty data returns ``prior``."""
    data = list(data)
    if not data:
        return prior
    X = np.array([s.x for s in data], dtype=float)
    g = np.array([s.g for s in data], dtype=float)
    l = np.array([s.weight for s in data], dtype=float)
    return nig_update_arrays(prior, X, g, l)


def recursive_step(prior: NigPosterior, sample: WeightedSample, n0: float) -> NigPosterior:
    """One fast-adaptation step with the prior strength held at ``n0`` points.

    Below strength (``a < n0/2``) this is a plain update.  At strength, the
    posterior is rescaled so that prior and new point together count as
    ``n0`` points again.
    """
    if not n0 > 0:
        raise PosteriorError("n0 must be positive")
    if sample.weight != 1.0:
        raise PosteriorError("recursive updates take weight-1 samples")
    post = nig_update(prior, [sample])
    if prior.a < 0.5 * n0:
        return post
    # multiply before dividing: keeps a == n0/2 exactly at steady state
    return NigPosterior(post.w_mean, (n0 + 1.0) * post.V / n0,
                        n0 * post.a / (n0 + 1.0), n0 * post.b / (n0 + 1.0))


def marginals(p: NigPosterior) -> PosteriorMarginals:
    defined = p.a > 1.0
    return PosteriorMarginals(
        w_mean=p.w_mean.copy(),
        w_scale=(p.b / p.a) * p.V,
        dof=2.0 * p.a,
        sigma2_mean=p.b / (p.a - 1.0) if defined else float("nan"),
        sigma2_mode=p.b / (p.a + 1.0),
        sigma2_mean_defined=defined,
    )


def noise_variance(p: NigPosterior) -> float:
    """Posterior mean of sigma^2, or its mode when the mean is undefined."""
    return p.b / (p.a - 1.0) if p.a > 1.0 else p.b / (p.a + 1.0)


def predict(p: NigPosterior, x) -> Prediction:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != p.dim:
        raise PosteriorError(f"feature dimension {x.size} does not match model dimension {p.dim}")
    mean = float(p.w_mean @ x)
    var = (p.b / p.a) * (1.0 + float(x @ p.V @ x))
    return Prediction(mean, var, 2.0 * p.a)


def predict_many(p: NigPosterior, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised predictive means and variances for the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != p.dim:
        raise PosteriorError(f"feature dimension {X.shape[1]} does not match model dimension {p.dim}")
    mean = X @ p.w_mean
    var = (p.b / p.a) * (1.0 + np.einsum("ij,jk,ik->i", X, p.V, X))
    return mean, var


def _student_t_logpdf(g, mean, var, dof):
    z2 = (g - mean) ** 2 / var
    return (gammaln(0.5 * (dof + 1.0)) - gammaln(0.5 * dof)
            - 0.5 * np.log(dof * math.pi * var)
            - 0.5 * (dof + 1.0) * np.log1p(z2 / dof))


def _gaussian_logpdf(g, mean, var):
    return -0.5 * (np.log(2.0 * math.pi * var) + (g - mean) ** 2 / var)


def log_predictive_density(p: NigPosterior, x, g: float, gaussian: bool = False) -> float:
    """Log posterior-predictive density of target ``g`` at ``x`` (Student-t by default)."""
    pred = predict(p, x)
    if gaussian:
        return float(_gaussian_logpdf(g, pred.mean, pred.variance))
    return float(_student_t_logpdf(g, pred.mean, pred.variance, pred.dof))


def log_predictive_many(p: NigPosterior, X, g, gaussian: bool = False) -> np.ndarray:
    mean, var = predict_many(p, X)
    g = np.asarray(g, dtype=float)
    if gaussian:
        return _gaussian_logpdf(g, mean, var)
    return _student_t_logpdf(g, mean, var, 2.0 * p.a)
