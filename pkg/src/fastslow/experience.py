"""Experience store and the fast / long-term model construction pipeline.

Samples are indexed by run and path vertex.  At each control step:

1. the newest sample updates the fast-adapting prior (fixed strength ``n0``);
2. every previous run is scored on the current run's recent samples: the
   fast prior updated with that run's data over the same path section must
   pass a binomial outlier test and beat the fast prior's likelihood;
3. accepted runs contribute their samples over the upcoming path section,
   weighted by likelihood ratio to the best run, to a transient posterior
   used only for this step's control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc
from scipy.stats import binom

from .wblr import (NigPosterior, WeightedSample, log_predictive_many, nig_update_stats,
                   predict_many, recursive_step, weighted_stats)

CHANNELS = ("v", "omega")
NCH = 2
DIM = 2


class ExperienceError(ValueError):
    pass


@dataclass(frozen=True)
class ExperienceSample:
    """One observed step: per-channel features (2, 2) and targets (2,)."""

    features: np.ndarray
    targets: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        f = np.array(self.features, dtype=float).reshape(NCH, DIM)
        g = np.array(self.targets, dtype=float).reshape(NCH)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g)) and math.isfinite(self.timestamp)):
            raise ExperienceError("non-finite sample")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", g)
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class SectionWindows:
    recent_sample_count: int = 30
    upcoming_vertex_span: int = 25

    def __post_init__(self):
        if self.recent_sample_count < 1 or self.upcoming_vertex_span < 1:
            raise ExperienceError("section windows must be positive")


def upcoming_span(horizon: int, dt: float, speed: float, spacing: float, margin: int = 1) -> int:
    """Vertices covered by the look-ahead at ``speed``, plus ``margin``."""
    return int(math.ceil(horizon * dt * max(speed, 0.0) / spacing)) + margin


@dataclass
class RunData:
    """Append-only columnar storage for one run."""

    vertices: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    features: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    _cache: tuple | None = None

    def append(self, vertex: int, sample: ExperienceSample):
        self.vertices.append(int(vertex))
        self.timestamps.append(sample.timestamp)
        self.features.append(sample.features)
        self.targets.append(sample.targets)
        self._cache = None

    def __len__(self):
        return len(self.vertices)

    def arrays(self):
        """(vertices (n,), timestamps (n,), features (n, 2, 2), targets (n, 2))."""
        if self._cache is None or self._cache[0].size != len(self.vertices):
            n = len(self.vertices)
            self._cache = (
                np.array(self.vertices, dtype=np.int64),
                np.array(self.timestamps, dtype=float),
                np.array(self.features, dtype=float).reshape(n, NCH, DIM),
                np.array(self.targets, dtype=float).reshape(n, NCH),
            )
        return self._cache


class ExperienceStore:
    """Samples indexed by (run id, vertex id).

    Single writer (the live run) appends; readers take ``snapshot()``.
    """

    def __init__(self, n_vertices: int):
        self.n_vertices = int(n_vertices)
        self.runs: dict[int, RunData] = {}

    def record(self, run_id: int, vertex_id: int, sample: ExperienceSample) -> None:
        if not 0 <= vertex_id < self.n_vertices:
            raise ExperienceError(f"unknown vertex {vertex_id}")
        if not isinstance(sample, ExperienceSample):
            sample = ExperienceSample(*sample)
        self.runs.setdefault(int(run_id), RunData()).append(vertex_id, sample)

    def samples_at(self, run_id: int, vertex_id: int) -> list[ExperienceSample]:
        run = self.runs.get(run_id)
        if run is None:
            return []
        return [ExperienceSample(f, g, t) for v, t, f, g in
                zip(run.vertices, run.timestamps, run.features, run.targets) if v == vertex_id]

    def run_ids(self) -> list[int]:
        return sorted(self.runs)

    def count(self, run_id: int | None = None) -> int:
        if run_id is None:
            return sum(len(r) for r in self.runs.values())
        return len(self.runs.get(run_id, ()))

    def section(self, run_id: int, lo: int, hi: int):
        """Features (n, 2, 2) and targets (n, 2) of ``run_id`` with vertex in [lo, hi]."""
        run = self.runs.get(run_id)
        if run is None or not len(run):
            return np.zeros((0, NCH, DIM)), np.zeros((0, NCH))
        v, _, f, g = run.arrays()
        m = (v >= lo) & (v <= hi)
        return f[m], g[m]

    def recent(self, run_id: int, count: int):
        """Last ``count`` samples of a run: (vertices, features, targets)."""
        run = self.runs.get(run_id)
        if run is None or not len(run):
            return np.zeros(0, dtype=np.int64), np.zeros((0, NCH, DIM)), np.zeros((0, NCH))
        v, _, f, g = run.arrays()
        return v[-count:], f[-count:], g[-count:]

    def snapshot(self) -> "ExperienceStore":
        snap = ExperienceStore(self.n_vertices)
        for rid, run in self.runs.items():
            snap.runs[rid] = RunData(list(run.vertices), list(run.timestamps),
                                     list(run.features), list(run.targets))
        return snap


@dataclass
class RecentData:
    """Current run's recent samples, D_n^-."""

    features: np.ndarray   # (n, 2, 2)
    targets: np.ndarray    # (n, 2)
    vertex_lo: int
    vertex_hi: int

    @property
    def size(self) -> int:
        return self.targets.shape[0]


@dataclass
class RunAssessment:
    run_id: int
    models: tuple            # per-channel NigPosterior fit on the run's recent section
    log_likelihood: float = float("nan")
    accepted: bool = False
    weight: float = 0.0
    exceedances: int = 0


def _fit(prior: NigPosterior, X, g) -> NigPosterior:
    if g.size == 0:
        return prior
    return nig_update_stats(prior, *weighted_stats(X, g, np.ones(g.size)))


def fit_recent_models(store: ExperienceStore, recent: RecentData,
                      base_priors: Sequence[NigPosterior], exclude_run: int | None = None,
                      runs: Sequence[int] | None = None) -> list[RunAssessment]:
    """Fit one model per previous run on its samples over the recent path section.

    Runs with no samples in the section are skipped.
    """
    out = []
    for rid in (store.run_ids() if runs is None else runs):
        if rid == exclude_run:
            continue
        f, g = store.section(rid, recent.vertex_lo, recent.vertex_hi)
        if g.shape[0] == 0:
            continue
        models = tuple(_fit(base_priors[c], f[:, c, :], g[:, c]) for c in range(NCH))
        out.append(RunAssessment(rid, models))
    return out


def exceedance_probability(r: float) -> float:
    """Two-sided standard-normal tail mass beyond ``r``."""
    return float(erfc(r / math.sqrt(2.0)))


def z_scores(models: Sequence[NigPosterior], recent: RecentData) -> np.ndarray:
    """Standardised prediction errors of the recent data, shape (n, channels)."""
    z = np.empty((recent.size, NCH))
    for c in range(NCH):
        mean, var = predict_many(models[c], recent.features[:, c, :])
        std = np.sqrt(var)
        with np.errstate(divide="ignore", invalid="ignore"):
            zc = (recent.targets[:, c] - mean) / std
        zc[~(std > 0)] = np.inf
        z[:, c] = zc
    return z


def outlier_reject(assessment: RunAssessment, recent: RecentData, r: float = 2.0,
                   alpha: float = 0.05, p_out: float | None = None) -> bool:
    """Return True when the run passes (is accepted).

    Counts recent points with ``|Z| > r`` over all channels and rejects when the
    one-sided binomial tail ``P(X >= k)`` falls below ``alpha``.  ``p_out``
    defaults to the two-sided Gaussian exceedance of ``r``.
    """
    if recent.size < 1:
        raise ExperienceError("outlier test needs at least one recent sample")
    z = z_scores(assessment.models, recent)
    k = int(np.count_nonzero(~(np.abs(z) <= r)))
    n = z.size
    p = exceedance_probability(r) if p_out is None else p_out
    assessment.exceedances = k
    tail = float(binom.sf(k - 1, n, p)) if k > 0 else 1.0
    assessment.accepted = not tail < alpha
    return assessment.accepted


def binomial_reject_threshold(n: int, r: float = 2.0, alpha: float = 0.05,
                              p_out: float | None = None) -> int:
    """Smallest exceedance count that is rejected."""
    p = exceedance_probability(r) if p_out is None else p_out
    for k in range(n + 1):
        if k > 0 and binom.sf(k - 1, n, p) < alpha:
            return k
    return n + 1


def data_log_likelihood(models: Sequence[NigPosterior], recent: RecentData,
                        gaussian: bool = False) -> float:
    """Sum of per-point log predictive densities over all channels."""
    total = 0.0
    for c in range(NCH):
        total += float(np.sum(log_predictive_many(models[c], recent.features[:, c, :],
                                                  recent.targets[:, c], gaussian=gaussian)))
    return total


def run_weights(assessments: list[RunAssessment], recent: RecentData,
                prior_models: Sequence[NigPosterior], gaussian: bool = False) -> list[RunAssessment]:
    """Likelihood-ratio weights relative to the best accepted run.

    Runs that failed the outlier test, or explain the recent data worse than
    ``prior_models``, get weight 0.  Equal run priors; ties go to the lowest id.
    """
    ll_prior = data_log_likelihood(prior_models, recent, gaussian)
    for a in assessments:
        a.log_likelihood = data_log_likelihood(a.models, recent, gaussian)
        if a.log_likelihood < ll_prior:
            a.accepted = False
    cands = [a for a in assessments if a.accepted]
    for a in assessments:
        a.weight = 0.0
    if not cands:
        return assessments
    best = min(cands, key=lambda a: (-a.log_likelihood, a.run_id))
    for a in cands:
        a.weight = 1.0 if a is best else float(min(math.exp(a.log_likelihood - best.log_likelihood),
                                                     1.0))
    return assessments


def build_predictive_model(fast_priors: Sequence[NigPosterior], store: ExperienceStore,
                           assessments: Sequence[RunAssessment], upcoming_lo: int,
                           upcoming_hi: int) -> tuple:
    """Weighted update of the fast priors with upcoming-section data of accepted runs.

    The fast priors themselves are untouched; the result is used for one step only.
    """
    acc = [a for a in assessments if a.weight > 0.0]
    if not acc:
        return tuple(fast_priors)
    feats, targs, wts = [], [], []
    for a in acc:
        f, g = store.section(a.run_id, upcoming_lo, upcoming_hi)
        if g.shape[0]:
            feats.append(f)
            targs.append(g)
            wts.append(np.full(g.shape[0], a.weight))
    if not feats:
        return tuple(fast_priors)
    f = np.concatenate(feats)
    g = np.concatenate(targs)
    w = np.concatenate(wts)
    return tuple(nig_update_stats(fast_priors[c], *weighted_stats(f[:, c, :], g[:, c], w))
                 for c in range(NCH))


@dataclass
class StepModel:
    """Result of the per-step model construction."""

    models: tuple
    fast_priors: tuple
    assessments: list
    upcoming: tuple


class LearningPipeline:
    """Per-vehicle learner combining fast adaptation and long-term learning.

    ``fast=False`` keeps the base prior fixed; ``long_term=False`` skips the
    use of previous runs.  With both off the model never changes.
    """

    def __init__(self, base_priors: Sequence[NigPosterior], store: ExperienceStore,
                 n0: float = 100.0, fast: bool = True, long_term: bool = True,
                 windows: SectionWindows | None = None, outlier_z: float = 2.0,
                 outlier_alpha: float = 0.05, gaussian_likelihood: bool = False):
        self.base_priors = tuple(base_priors)
        self.fast_priors = tuple(base_priors)
        self.store = store
        self.n0 = n0
        self.fast = fast
        self.long_term = long_term
        self.windows = windows or SectionWindows()
        self.outlier_z = outlier_z
        self.outlier_alpha = outlier_alpha
        self.gaussian = gaussian_likelihood

    def start_run(self, reset_fast: bool = False):
        if reset_fast:
            self.fast_priors = self.base_priors

    def observe(self, run_id: int, vertex_id: int, sample: ExperienceSample) -> None:
        self.store.record(run_id, vertex_id, sample)
        if self.fast:
            self.fast_priors = tuple(
                recursive_step(self.fast_priors[c],
                               WeightedSample(sample.features[c], sample.targets[c], 1.0), self.n0)
                for c in range(NCH))

    def recent_data(self, run_id: int) -> RecentData | None:
        v, f, g = self.store.recent(run_id, self.windows.recent_sample_count)
        if v.size == 0:
            return None
        return RecentData(f, g, int(v.min()), int(v.max()))

    def step_model(self, run_id: int, current_vertex: int) -> StepModel:
        lo = current_vertex
        hi = min(current_vertex + self.windows.upcoming_vertex_span, self.store.n_vertices - 1)
        if not self.long_term:
            return StepModel(self.fast_priors, self.fast_priors, [], (lo, hi))
        recent = self.recent_data(run_id)
        if recent is None:
            return StepModel(self.fast_priors, self.fast_priors, [], (lo, hi))
        previous = [r for r in self.store.run_ids() if r != run_id]
        # run models start from the live prior, so the comparison with it is like for like
        assessments = fit_recent_models(self.store, recent, self.fast_priors, runs=previous)
        for a in assessments:
            outlier_reject(a, recent, self.outlier_z, self.outlier_alpha)
        run_weights(assessments, recent, self.fast_priors, self.gaussian)
        models = build_predictive_model(self.fast_priors, self.store, assessments, lo, hi)
        return StepModel(models, self.fast_priors, assessments, (lo, hi))
