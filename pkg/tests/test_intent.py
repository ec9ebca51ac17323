import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maipp.gp import uniform_grid
from maipp.intent import COV_FLOOR, IntentDistribution, eval_intent, fit_intent, fuse_intents, intent_from_candidates

GRID = uniform_grid(30)


def test_degenerate_waypoints_get_floor():
    it = fit_intent([[0.3, 0.7]] * 4)
    np.testing.assert_array_equal(it.mean, [0.3, 0.7])
    np.testing.assert_allclose(it.cov, COV_FLOOR * np.eye(2), atol=1e-18)


def test_symmetric_pair_mean_at_origin():
    assert np.array_equal(fit_intent([[-0.2, 0.0], [0.2, 0.0]]).mean, [0.0, 0.0])


def test_triangle_moments():
    it = fit_intent([[0, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(it.mean, [1 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(it.cov, np.array([[2 / 9, -1 / 9], [-1 / 9, 2 / 9]]) + COV_FLOOR * np.eye(2), atol=1e-15)


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit_intent(np.zeros((0, 2)))


def test_covariance_symmetric_above_floor(rng):
    it = fit_intent(rng.uniform(size=(8, 2)))
    assert np.abs(it.cov - it.cov.T).max() <= 1e-12
    assert np.linalg.eigvalsh(it.cov).min() >= COV_FLOOR - 1e-15


def test_empty_fusion_is_zero_map():
    acc = fuse_intents([], GRID)
    assert np.all(acc.grid_values == 0.0)
    assert np.all(eval_intent(acc, [[0.1, 0.2], [0.5, 0.5]]) == 0.0)


def test_single_component_argmax_cell_contains_mean():
    it = IntentDistribution(np.array([0.41, 0.63]), 0.01 * np.eye(2))
    acc = fuse_intents([it], GRID)
    c = GRID[np.argmax(acc.grid_values)]
    assert np.all(np.abs(c - it.mean) <= 0.5 / 30 + 1e-12)


def test_two_identical_components_equal_single():
    it = fit_intent([[0.2, 0.3], [0.4, 0.35], [0.5, 0.6]])
    one, two = fuse_intents([it], GRID), fuse_intents([it, it], GRID)
    np.testing.assert_allclose(two.grid_values, one.grid_values, rtol=1e-14)


def test_far_point_negligible():
    it = IntentDistribution(np.array([0.1, 0.1]), 0.0004 * np.eye(2))
    acc = fuse_intents([it], GRID)
    assert eval_intent(acc, [[0.9, 0.9]])[0] < 1e-6 * acc.grid_values.max()


def test_lone_isotropic_component_peak_at_mean():
    mu = GRID[437]
    acc = fuse_intents([IntentDistribution(mu, 0.01 * np.eye(2))], GRID)
    assert eval_intent(acc, [mu])[0] == pytest.approx(acc.grid_values.max(), rel=1e-14)


def test_candidates_union_fit(rng):
    c = rng.uniform(size=(8, 2))
    a, b = intent_from_candidates([c]), fit_intent(c)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)
    cands = [rng.uniform(size=(8, 2)) for _ in range(5)]
    np.testing.assert_allclose(intent_from_candidates(cands).mean, np.vstack(cands).mean(0), atol=1e-15)
    mirror = intent_from_candidates([[[0.3, 0.2], [0.3, 0.4]], [[0.7, 0.2], [0.7, 0.4]]])
    assert mirror.mean[0] == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        intent_from_candidates([])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5))
def test_fused_map_integrates_to_one(seed, n):
    r = np.random.default_rng(seed)
    comps = [fit_intent(r.uniform(size=(r.integers(1, 9), 2))) for _ in range(n)]
    acc = fuse_intents(comps, GRID)
    assert abs(acc.grid_values.sum() * acc.cell_area - 1.0) < 1e-6
    assert np.all(acc.grid_values >= 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(-8, 8), j=st.integers(-8, 8))
def test_translation_equivariance_exact(seed, k, j):
    # dyadic coordinates and shifts keep every sum exact in binary floating point
    r = np.random.default_rng(seed)
    w = r.integers(0, 64, size=(8, 2)) / 64.0
    t = np.array([k, j]) / 16.0
    a, b = fit_intent(w), fit_intent(w + t)
    assert np.array_equal(b.mean, a.mean + t)
    assert np.array_equal(b.cov, a.cov)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fusion_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    comps = [fit_intent(r.uniform(size=(5, 2))) for _ in range(4)]
    a = fuse_intents(comps, GRID).grid_values
    b = fuse_intents([comps[i] for i in r.permutation(4)], GRID).grid_values
    assert np.array_equal(a, b)
