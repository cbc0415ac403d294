import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from fastslow.wblr import (NigPosterior, PosteriorError, WeightedSample, default_prior,
                           log_predictive_density, log_predictive_many, marginals, nig_update,
                           nig_update_arrays, noise_variance, predict, predict_many,
                           recursive_step)


def random_prior(rng, d):
    A = rng.normal(size=(d, d))
    V0 = A @ A.T + 0.5 * np.eye(d)
    return NigPosterior(rng.normal(size=d), V0, rng.uniform(0.5, 5), rng.uniform(0.1, 3))


def assert_post_close(p, w, V, a, b, tol=1e-9):
    np.testing.assert_allclose(p.w_mean, w, rtol=tol, atol=tol)
    np.testing.assert_allclose(p.V, V, rtol=tol, atol=tol)
    assert p.a == pytest.approx(a, rel=tol, abs=tol)
    assert p.b == pytest.approx(b, rel=tol, abs=tol)


def test_empty_data_returns_prior():
    p = default_prior()
    assert nig_update(p, []) is p


def test_hand_evaluated_scalar_update():
    prior = NigPosterior([0.0], [[1.0]], 1.0, 1.0)
    post = nig_update(prior, [WeightedSample([1.0], 1.0, 1.0)])
    assert_post_close(post, [0.5], [[0.5]], 1.5, 1.25, tol=1e-15)
    # same numbers from the textbook oracle
    w, V, a, b = oracles.blr(np.zeros(1), np.eye(1), 1.0, 1.0, [[1.0]], [1.0])
    assert_post_close(post, w, V, a, b)


def test_half_weight_pair_equals_single_point(rng):
    prior = random_prior(rng, 2)
    x, g = rng.normal(size=2), rng.normal()
    one = nig_update(prior, [WeightedSample(x, g, 1.0)])
    two = nig_update(prior, [WeightedSample(x, g, 0.5), WeightedSample(x, g, 0.5)])
    assert_post_close(two, one.w_mean, one.V, one.a, one.b, tol=1e-12)


def test_replication_oracle_randomized(rng):
    for _ in range(200):
        d = int(rng.integers(1, 4))
        prior = random_prior(rng, d)
        n = int(rng.integers(1, 12))
        X = rng.normal(size=(n, d))
        g = X @ rng.normal(size=d) + 0.3 * rng.normal(size=n)
        wts = rng.choice([0.0, 0.5, 1.0], size=n)
        post = nig_update_arrays(prior, X, g, wts)
        # doubling every weight (prior included) gives integer counts; the doubled
        # problem has twice the precision, a and b of the weighted one
        Xr, gr = oracles.replicate(X, g, wts, 0.5)
        w, V, a, b = oracles.blr(prior.w_mean, prior.V / 2, 2 * prior.a, 2 * prior.b, Xr, gr)
        assert_post_close(post, w, 2 * V, a / 2, b / 2)


def test_zero_weight_is_inert(rng):
    prior = random_prior(rng, 2)
    X = rng.normal(size=(5, 2))
    g = rng.normal(size=5)
    assert nig_update_arrays(prior, X, g, np.zeros(5)) == prior


def test_order_invariance(rng):
    prior = random_prior(rng, 3)
    data = [WeightedSample(rng.normal(size=3), rng.normal(), rng.uniform()) for _ in range(8)]
    batch = nig_update(prior, data)
    seq = prior
    for s in reversed(data):
        seq = nig_update(seq, [s])
    assert_post_close(seq, batch.w_mean, batch.V, batch.a, batch.b)


@pytest.mark.parametrize("bad", [
    WeightedSample([1.0, 0.0], 1.0, 1.5),
    WeightedSample([1.0, 0.0], 1.0, -0.1),
    WeightedSample([np.nan, 0.0], 1.0, 1.0),
    WeightedSample([1.0, 0.0], np.inf, 1.0),
])
def test_invalid_samples_rejected(bad):
    with pytest.raises(PosteriorError):
        nig_update(default_prior(), [bad])


def test_dimension_mismatch_rejected():
    with pytest.raises(PosteriorError):
        nig_update(default_prior(), [WeightedSample([1.0, 2.0, 3.0], 1.0)])
    with pytest.raises(PosteriorError):
        predict(default_prior(), [1.0])


def test_invalid_posterior_rejected():
    with pytest.raises(PosteriorError):
        NigPosterior([0.0], [[1.0]], 0.0, 1.0)
    with pytest.raises(PosteriorError):
        NigPosterior([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], 1.0, 1.0)
    with pytest.raises(PosteriorError):
        NigPosterior([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], 1.0, 1.0)


def test_b_floor_on_exact_fit():
    prior = NigPosterior([1.0], [[1e-12]], 1.0, 1e-14)
    post = nig_update(prior, [WeightedSample([1.0], 1.0)])
    assert post.b >= 1e-12


def test_record_round_trip(rng):
    p = random_prior(rng, 2)
    assert NigPosterior.from_record(p.to_record(), 2) == p
    with pytest.raises(PosteriorError):
        NigPosterior.from_record(p.to_record()[:-1], 2)


def test_posterior_is_immutable():
    p = default_prior()
    with pytest.raises(ValueError):
        p.w_mean[0] = 5.0


def test_default_prior_values():
    p = default_prior()
    np.testing.assert_array_equal(p.w_mean, [2.0, -2.0])
    np.testing.assert_array_equal(p.V, np.eye(2))
    assert (p.a, p.b) == (2.0, 0.5)


# -- recursive updates ------------------------------------------------------

def test_recursive_below_strength_is_plain_update(rng):
    prior = default_prior()
    s = WeightedSample(rng.normal(size=2), rng.normal())
    assert recursive_step(prior, s, 100) == nig_update(prior, [s])


def test_recursive_steady_state_is_exact(rng):
    p = NigPosterior([0.0, 0.0], np.eye(2), 50.0, 5.0)
    for _ in range(500):
        p = recursive_step(p, WeightedSample(rng.normal(size=2), rng.normal()), 100)
        assert abs(p.a - 50.0) <= 1e-12


def test_recursive_rescaling_formula(rng):
    prior = NigPosterior([0.3, -0.2], [[0.2, 0.01], [0.01, 0.1]], 50.0, 4.0)
    s = WeightedSample([1.0, 0.5], 0.7)
    post = nig_update(prior, [s])
    r = recursive_step(prior, s, 100)
    np.testing.assert_allclose(r.V, 101 / 100 * post.V, rtol=1e-14)
    np.testing.assert_array_equal(r.w_mean, post.w_mean)
    assert r.b == pytest.approx(100 / 101 * post.b, rel=1e-14)


def test_recursive_rejects_weighted_sample():
    with pytest.raises(PosteriorError):
        recursive_step(default_prior(), WeightedSample([1.0, 0.0], 0.0, 0.5), 100)
    with pytest.raises(PosteriorError):
        recursive_step(default_prior(), WeightedSample([1.0, 0.0], 0.0), 0)


def test_recursive_converges_to_generator(rng):
    w_true = np.array([1.5, -0.7])
    p = default_prior()
    for _ in range(5000):
        x = rng.normal(size=2)
        p = recursive_step(p, WeightedSample(x, w_true @ x + 0.1 * rng.normal()), 100)
    se = np.sqrt(np.diag(marginals(p).w_scale))
    assert np.all(np.abs(p.w_mean - w_true) <= 2 * se)


# -- marginals and predictions ----------------------------------------------

def test_marginals_direct_formula():
    m = marginals(NigPosterior([0.0, 0.0], np.eye(2), 2.0, 3.0))
    assert m.sigma2_mean == 3.0
    np.testing.assert_array_equal(m.w_scale, 1.5 * np.eye(2))
    assert m.dof == 4.0
    assert m.sigma2_mode == 1.0


def test_marginals_flag_undefined_mean():
    m = marginals(NigPosterior([0.0], [[1.0]], 1.0, 1.0))
    assert not m.sigma2_mean_defined and math.isnan(m.sigma2_mean)
    assert noise_variance(NigPosterior([0.0], [[1.0]], 1.0, 1.0)) == 0.5


def test_marginals_recover_noise_variance(rng):
    X = rng.normal(size=(10000, 2))
    g = X @ np.array([0.4, 1.2]) + 0.3 * rng.normal(size=10000)
    m = marginals(nig_update_arrays(default_prior(), X, g))
    assert m.sigma2_mean == pytest.approx(0.09, rel=0.1)


def test_predict_at_zero_feature():
    p = NigPosterior([1.0, 2.0], np.eye(2), 3.0, 1.5)
    pred = predict(p, [0.0, 0.0])
    assert pred.mean == 0.0 and pred.variance == 0.5 and pred.dof == 6.0
    assert pred.gaussian() == (0.0, 0.5)


def test_predictive_variance_shrinks_with_data():
    # at fixed b/a the predictive variance is monotone in x^T V x
    p = NigPosterior([0.0, 0.0], np.eye(2), 3.0, 3.0)
    x = np.array([0.5, -1.0])
    last = float(x @ p.V @ x)
    for _ in range(10):
        p = nig_update(p, [WeightedSample(x, 0.0)])
        q = float(x @ p.V @ x)
        assert q <= last
        last = q


def test_predict_many_matches_predict(rng):
    p = random_prior(rng, 2)
    X = rng.normal(size=(7, 2))
    mean, var = predict_many(p, X)
    for i in range(7):
        pr = predict(p, X[i])
        assert mean[i] == pytest.approx(pr.mean, abs=1e-14)
        assert var[i] == pytest.approx(pr.variance, rel=1e-13)


def test_predictive_matches_replicated_oracle(rng):
    prior = default_prior()
    X = rng.normal(size=(6, 2))
    g = X @ np.array([1.0, -1.0]) + 0.2 * rng.normal(size=6)
    wts = np.array([1.0, 0.5, 0.5, 1.0, 0.0, 1.0])
    post = nig_update_arrays(prior, X, g, wts)
    Xr, gr = oracles.replicate(X, g, wts, 0.5)
    w, V, a, b = oracles.blr(prior.w_mean, prior.V / 2, 2 * prior.a, 2 * prior.b, Xr, gr)
    V, a, b = 2 * V, a / 2, b / 2
    for x_new, g_new in zip(rng.normal(size=(5, 2)), rng.normal(size=5)):
        scale2 = b / a * (1 + x_new @ V @ x_new)
        ref = math.log(oracles.student_t_pdf(g_new, w @ x_new, scale2, 2 * a))
        assert log_predictive_density(post, x_new, g_new) == pytest.approx(ref, abs=1e-9)


def test_density_integrates_to_one():
    p = NigPosterior([0.5, -0.3], [[0.4, 0.1], [0.1, 0.2]], 2.5, 1.2)
    x = np.array([1.0, 0.7])
    pr = predict(p, x)
    f = lambda g: np.exp(log_predictive_many(p, np.tile(x, (g.size, 1)), g))
    half = 4000 * pr.std
    assert oracles.simpson(f, pr.mean - half, pr.mean + half, 400001) == pytest.approx(1.0, abs=1e-6)


def test_density_peaks_at_mean():
    p = NigPosterior([0.5, -0.3], np.eye(2), 2.5, 1.2)
    x = [1.0, 0.7]
    m = predict(p, x).mean
    peak = log_predictive_density(p, x, m)
    for dg in (-1.0, -1e-3, 1e-3, 0.5):
        assert log_predictive_density(p, x, m + dg) < peak


def test_gaussian_variant():
    p = NigPosterior([0.0], [[1.0]], 2.0, 2.0)
    got = log_predictive_density(p, [0.0], 0.3, gaussian=True)
    assert got == pytest.approx(-0.5 * (math.log(2 * math.pi) + 0.09), abs=1e-14)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10),
                          st.sampled_from([0.0, 0.25, 0.5, 1.0])), min_size=1, max_size=20))
def test_property_update_invariants(rows):
    prior = default_prior()
    X = np.array([[r[0], r[1]] for r in rows])
    g = np.array([r[2] for r in rows])
    wts = np.array([r[3] for r in rows])
    post = nig_update_arrays(prior, X, g, wts)
    # weight monotonicity and SPD
    assert post.a == pytest.approx(prior.a + wts.sum() / 2, abs=1e-12)
    assert np.linalg.eigvalsh(post.V).min() > 0
    assert post.b > 0


@given(st.integers(1, 300), st.floats(1.0, 400.0))
def test_property_recursive_strength_never_exceeds_n0(steps, n0):
    rng = np.random.default_rng(steps)
    p = default_prior()
    for _ in range(steps):
        p = recursive_step(p, WeightedSample(rng.normal(size=2), rng.normal()), n0)
    assert p.a <= max(n0 / 2, default_prior().a) + 0.5 + 1e-9
