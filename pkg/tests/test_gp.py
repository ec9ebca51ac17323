import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maipp.gp import (
    BeliefModel,
    GainEvaluator,
    GPConditioningError,
    KernelParams,
    PosteriorField,
    condition_variance_only,
    cov_trace,
    info_gain,
    interest_set,
    matern32,
    posterior,
    uniform_grid,
)

P0 = KernelParams(0.125, 1.0, 0.0)


def dense_oracle(X, Y, Xs, params, prior_mean=0.0):
    """Textbook GP posterior via an explicit inverse of K + σ_n² I."""
    def k(a, b):
        d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        r = np.sqrt(3.0) * d / params.lengthscale
        return params.signal_variance * (1 + r) * np.exp(-r)

    if len(X) == 0:
        return np.full(len(Xs), prior_mean), k(Xs, Xs)
    Kinv = np.linalg.inv(k(X, X) + (params.noise_variance + 1e-10) * np.eye(len(X)))
    Ks = k(Xs, X)
    return prior_mean + Ks @ Kinv @ (Y - prior_mean), k(Xs, Xs) - Ks @ Kinv @ Ks.T


def test_matern_at_zero_and_far():
    assert matern32(0.0) == 1.0
    assert matern32(100 * 0.125) < 1e-60


def test_matern_at_lengthscale_closed_form():
    exact = (1 + mpmath.sqrt(3)) * mpmath.exp(-mpmath.sqrt(3))
    assert abs(matern32(0.125, KernelParams(0.125, 1.0)) - float(exact)) < 1e-12
    assert abs(float(exact) - 0.48335) < 1e-5


def test_matern_negative_distance_rejected():
    with pytest.raises(ValueError):
        matern32(-0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=2, max_size=20))
def test_matern_monotone_non_increasing(ds):
    d = np.sort(np.asarray(ds))
    assert np.all(np.diff(matern32(d)) <= 0)


@pytest.mark.parametrize("bad", [dict(lengthscale=0.0), dict(signal_variance=-1.0), dict(noise_variance=-1e-3)])
def test_kernel_params_validated(bad):
    with pytest.raises(ValueError):
        KernelParams(**bad)


def test_empty_belief_is_prior():
    post = posterior(BeliefModel(), uniform_grid(5))
    assert np.all(post.mean == 0.0) and np.all(post.var == 1.0)


def test_exact_interpolation_noise_free():
    b = BeliefModel([[0.3, 0.4]], [0.7], P0)
    post = posterior(b, [[0.3, 0.4]])
    assert abs(post.mean[0] - 0.7) < 1e-8 and post.var[0] < 1e-8


def test_two_measurements_explicit_2x2_inverse():
    params = KernelParams(0.125, 1.0, 1e-4)
    X = np.array([[0.2, 0.3], [0.25, 0.35]])
    Y = np.array([0.4, 0.9])
    Xs = np.array([[0.2, 0.3], [0.5, 0.5], [0.22, 0.31]])
    d = np.linalg.norm(X[0] - X[1])
    k01 = matern32(d, params)
    a = 1.0 + params.noise_variance + 1e-10
    inv = np.array([[a, -k01], [-k01, a]]) / (a * a - k01 * k01)
    Ks = np.array([[matern32(np.linalg.norm(x - xi), params) for xi in X] for x in Xs])
    mean = Ks @ inv @ Y
    var = 1.0 - np.einsum("ij,jk,ik->i", Ks, inv, Ks)
    post = posterior(BeliefModel(X, Y, params), Xs)
    np.testing.assert_allclose(post.mean, mean, atol=1e-10)
    np.testing.assert_allclose(post.var, var, atol=1e-10)


def test_random_instances_match_dense_oracle(rng):
    for _ in range(20):
        n, q = rng.integers(1, 30), rng.integers(1, 40)
        X, Y, Xs = rng.uniform(size=(n, 2)), rng.uniform(size=n), rng.uniform(size=(q, 2))
        params = KernelParams(0.125, 1.0, 1e-4)
        mu, cov = dense_oracle(X, Y, Xs, params)
        post = posterior(BeliefModel(X, Y, params), Xs, full_cov=True)
        np.testing.assert_allclose(post.mean, mu, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(post.cov, cov, rtol=1e-8, atol=1e-10)


def test_full_covariance_symmetric_and_psd(rng):
    X = rng.uniform(size=(20, 2))
    post = posterior(BeliefModel(X, rng.uniform(size=20)), rng.uniform(size=(100, 2)), full_cov=True)
    assert np.abs(post.cov - post.cov.T).max() < 1e-10
    assert np.linalg.eigvalsh(post.cov).min() >= -1e-8


def test_refresh_leaves_posterior_unchanged(rng):
    b = BeliefModel(rng.uniform(size=(15, 2)), rng.uniform(size=15))
    q = rng.uniform(size=(30, 2))
    p1, p2 = posterior(b, q), posterior(b.refreshed(), q)
    assert np.abs(p1.mean - p2.mean).max() <= 1e-12 and np.abs(p1.var - p2.var).max() <= 1e-12


def test_empty_query_rejected():
    with pytest.raises(ValueError):
        posterior(BeliefModel(), np.zeros((0, 2)))


def test_failed_factorisation_reports_condition(monkeypatch):
    import maipp.gp as gp

    def fail(*a, **k):
        raise np.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(gp, "cho_factor", fail)
    X = np.array([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(GPConditioningError) as info:
        BeliefModel(X, np.zeros(2), P0)
    assert info.value.condition > 1e8
    assert "condition estimate" in str(info.value)


def test_duplicate_noise_free_points_still_factorise():
    b = BeliefModel(np.array([[0.5, 0.5]] * 3), np.zeros(3), P0)
    assert posterior(b, [[0.5, 0.5]]).var[0] < 1e-8


def test_interest_set_examples():
    post = PosteriorField(np.zeros((2, 2)), np.array([0.3, 0.5]), np.array([0.05, 0.0]))
    assert interest_set(post, 0.4, 1.0).flags.tolist() == [False, True]
    assert interest_set(post, -1.0).flags.all()
    assert not interest_set(post, 10.0).flags.any()


def test_interest_set_threshold_monotone(rng):
    post = PosteriorField(np.zeros((50, 2)), rng.uniform(size=50), rng.uniform(size=50))
    prev = interest_set(post, 0.0).flags
    for th in np.linspace(0.0, 2.0, 21):
        cur = interest_set(post, th).flags
        assert not np.any(cur & ~prev)
        prev = cur


def test_cov_trace_examples():
    post = PosteriorField(np.zeros((3, 2)), np.zeros(3), np.array([0.2, 0.3, 0.5]))
    m = interest_set(post, 0.4)
    assert cov_trace(post, interest_set(post, 10.0)) == 0.0
    from maipp.gp import InterestMask
    assert cov_trace(post, InterestMask(np.array([True, False, True]), 0.4, 1.0)) == pytest.approx(0.7, abs=1e-15)
    g = uniform_grid(6)
    prior = posterior(BeliefModel(), g)
    assert cov_trace(prior, interest_set(prior, -1.0)) == len(g)
    assert m.count == 1


def test_info_gain_examples():
    assert info_gain(3.0, 3.0) == 0.0
    assert info_gain(10.0, 7.5) == 2.5


def test_y_independence_of_variance(rng):
    X, Y, q = rng.uniform(size=(12, 2)), rng.uniform(size=12), rng.uniform(size=(40, 2))
    v1 = posterior(BeliefModel(X, Y), q).var
    assert np.array_equal(v1, posterior(BeliefModel(X, 10 * Y), q).var)
    assert np.array_equal(v1, posterior(BeliefModel(X, rng.permutation(Y)), q).var)


def test_condition_variance_only_examples(rng):
    b = BeliefModel(rng.uniform(size=(5, 2)), rng.uniform(size=5))
    q = uniform_grid(8)
    p = posterior(b, q)
    same = posterior(condition_variance_only(b, np.zeros((0, 2))), q)
    assert np.array_equal(p.var, same.var) and np.array_equal(p.mean, same.mean)

    b0 = BeliefModel(params=P0)
    c = posterior(condition_variance_only(b0, q[:1]), q[:1])
    assert c.var[0] < 1e-8

    Z = rng.uniform(size=(7, 2))
    cond = posterior(condition_variance_only(b, Z), q)
    dummy = posterior(b.with_measurements(Z, np.zeros(7)), q)
    np.testing.assert_allclose(cond.var, dummy.var, atol=1e-12)
    assert np.array_equal(cond.mean, p.mean)


def test_gain_evaluator_equals_trace_difference(rng):
    b = BeliefModel(rng.uniform(size=(10, 2)), rng.uniform(size=10))
    q = uniform_grid(12)
    mask = interest_set(posterior(b, q), 0.4)
    Z = rng.uniform(size=(6, 2))
    before = cov_trace(posterior(b, q), mask)
    after = cov_trace(posterior(condition_variance_only(b, Z), q), mask)
    assert GainEvaluator(b, mask.interest_points).gain(Z) == pytest.approx(before - after, rel=1e-9)


def test_posterior_csv_has_shape_header(tmp_path):
    post = posterior(BeliefModel(), uniform_grid(3))
    post.to_csv(tmp_path / "p.csv", (3, 3))
    text = (tmp_path / "p.csv").read_text().splitlines()
    assert text[0] == "# grid_shape=3x3"
    assert len(np.loadtxt(tmp_path / "p.csv", delimiter=",")) == 9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(0, 15))
def test_adding_a_measurement_never_increases_variance(seed, n):
    r = np.random.default_rng(seed)
    b = BeliefModel(r.uniform(size=(n, 2)), r.uniform(size=n))
    q = r.uniform(size=(30, 2))
    before = posterior(b, q)
    after = posterior(b.with_measurements(r.uniform(size=(1, 2)), [r.uniform()]), q)
    assert np.all(after.var <= before.var + 1e-10)
    mask = interest_set(before, 0.4)
    assert info_gain(cov_trace(before, mask), cov_trace(after, mask)) >= -1e-10
