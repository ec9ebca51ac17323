import math

import numpy as np
import pytest

from maipp import autodiff as ad
from maipp.diffusion import (
    BCConfig,
    NoiseSchedule,
    bc_loss,
    candidate_scores,
    cosine_lr,
    deltas_to_waypoints,
    forward_noise,
    reverse_mean,
    sample_actions,
    sample_chain,
    select_best,
    train_bc,
    waypoints_to_deltas,
)
from maipp.env import path_samples
from maipp.gp import BeliefModel, InterestMask, condition_variance_only, posterior
from maipp.nets import DenoiserConfig, EncoderConfig, NetConfig, ObsBatch, PolicyNetworks

SMALL = NetConfig(EncoderConfig(d=8, heads=2, ffn_hidden=16), DenoiserConfig(channels=(4, 6), step_embed=8, cond_hidden=8), critic_hidden=8)


def one_obs(rng, b=1, n=6):
    nodes = rng.uniform(size=(b, n, 5))
    agent = rng.uniform(size=(b, 4))
    return ObsBatch(nodes, rng.normal(size=(b, n, 32)), agent, nodes.copy(), agent.copy())


class ExactPointMassDenoiser:
    """Bayes-optimal noise predictor when every demonstration equals ``target``."""

    def __init__(self, target, schedule):
        self.target = np.asarray(target, float)
        self.schedule = schedule
        self.config = NetConfig()

    def encode_actor(self, batch):
        return ad.Tensor(np.zeros((len(batch), 64)))

    def eps(self, s_hat, noisy, k):
        x = np.asarray(getattr(noisy, "data", noisy))
        ab = self.schedule.alpha_bars[np.broadcast_to(np.asarray(k), (len(x),))][:, None, None]
        return ad.Tensor((x - np.sqrt(ab) * self.target) / np.sqrt(1 - ab))


def test_schedule_running_product_and_monotone():
    s = NoiseSchedule.linear()
    assert s.K == 20
    ab = s.alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    ref = np.cumprod(1.0 - s.betas)
    assert np.abs(ab[1:] - ref).max() < 1e-15
    assert ab[-1] < 0.02


@pytest.mark.parametrize("betas", [[0.1, 0.05], [0.0, 0.1], [0.5, 1.0], []])
def test_bad_schedules(betas):
    with pytest.raises(ValueError):
        NoiseSchedule(np.array(betas))


def test_sigma_values():
    s = NoiseSchedule.linear()
    assert s.sigma(1) == 0.0
    k = 7
    ab = s.alpha_bars
    assert math.isclose(s.sigma(k) ** 2, s.beta(k) * (1 - ab[k - 1]) / (1 - ab[k]), rel_tol=1e-14)


def test_forward_noise_examples():
    s = NoiseSchedule(np.array([0.25]))
    np.testing.assert_allclose(forward_noise(np.zeros((8, 2)), 1, np.ones((8, 2)), s), 0.5, atol=1e-15)
    tiny = NoiseSchedule(np.array([1e-12]))
    d0 = np.random.default_rng(0).uniform(-1, 1, (8, 2))
    np.testing.assert_allclose(forward_noise(d0, 1, np.ones((8, 2)), tiny), d0, atol=1e-5)


def test_forward_noise_terminal_statistics(rng):
    s = NoiseSchedule.linear()
    d0 = np.full((10_000, 8, 2), 0.7)
    x = forward_noise(d0, np.full(10_000, s.K), rng.standard_normal(d0.shape), s)
    assert abs(x.mean()) < 0.05 and abs(x.var() - 1) < 0.05


def test_reverse_mean_formula(rng):
    s = NoiseSchedule.linear()
    x, e = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    k = 5
    expect = (x - s.beta(k) / np.sqrt(1 - s.alpha_bar(k)) * e) / np.sqrt(1 - s.beta(k))
    np.testing.assert_allclose(reverse_mean(x, e, k, s), expect, rtol=0, atol=1e-15)


def test_exact_denoiser_recovers_point_mass(rng):
    s = NoiseSchedule.linear()
    target = rng.uniform(-0.8, 0.8, size=(8, 2))
    chain = sample_chain(ExactPointMassDenoiser(target, s), one_obs(rng), s, rng, n_candidates=4)
    # at k = 1 the posterior mean is exactly the data point and the last step is noiseless
    np.testing.assert_allclose(chain.final, np.broadcast_to(target, (4, 8, 2)), atol=1e-9)


def test_bc_loss_perfect_predictor_is_zero(rng):
    s = NoiseSchedule.linear()
    target = rng.uniform(-1, 1, size=(8, 2))
    stub = ExactPointMassDenoiser(target, s)
    loss = bc_loss(stub, one_obs(rng, b=3), np.broadcast_to(target, (3, 8, 2)), s, rng, draws=4)
    assert loss.item() < 1e-20


def test_bc_loss_zero_predictor_is_unit(rng):
    nets = PolicyNetworks(SMALL, seed=0)
    nets.actor["den.out.w"].data[...] = 0
    nets.actor["den.out.b"].data[...] = 0
    loss = bc_loss(nets, one_obs(rng, b=50), rng.uniform(-1, 1, size=(50, 8, 2)), NoiseSchedule.linear(), rng, draws=40)
    assert abs(loss.item() - 1.0) < 0.05


def test_bc_loss_rejects_empty(rng):
    with pytest.raises(ValueError):
        bc_loss(PolicyNetworks(SMALL), one_obs(rng, b=0), np.zeros((0, 8, 2)), NoiseSchedule.linear(), rng)


def test_sample_actions_shape_and_determinism():
    nets = PolicyNetworks(SMALL, seed=1)
    obs = one_obs(np.random.default_rng(0))
    a = sample_actions(nets, obs, NoiseSchedule.linear(), np.random.default_rng(5))
    b = sample_actions(nets, obs, NoiseSchedule.linear(), np.random.default_rng(5))
    assert len(a) == 5 and all(x.shape == (8, 2) for x in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(np.abs(x).max() <= 1.0 for x in a)


def test_chain_states_finite_and_shaped(rng):
    s = NoiseSchedule.linear()
    chain = sample_chain(PolicyNetworks(SMALL, seed=2), one_obs(rng), s, rng, n_candidates=3)
    assert sorted(chain.states) == list(range(s.K + 1))
    for x in chain.states.values():
        assert x.shape == (3, 8, 2) and np.all(np.isfinite(x))


def test_chain_early_steps_use_frozen_network(rng):
    s = NoiseSchedule.linear()
    nets, frozen = PolicyNetworks(SMALL, seed=3), PolicyNetworks(SMALL, seed=4)
    obs = one_obs(rng)
    mixed = sample_chain(nets, obs, s, np.random.default_rng(1), 2, early_nets=frozen, late_steps=5)
    ref = sample_chain(frozen, obs, s, np.random.default_rng(1), 2)
    # identical until the fine-tuned network takes over at k = late_steps
    for k in range(s.K, 5, -1):
        np.testing.assert_array_equal(mixed.states[k], ref.states[k])
    assert not np.array_equal(mixed.states[0], ref.states[0])


def test_sample_chain_single_observation_only(rng):
    with pytest.raises(ValueError):
        sample_chain(PolicyNetworks(SMALL), one_obs(rng, b=2), NoiseSchedule.linear(), rng)


def test_deltas_to_waypoints_examples():
    np.testing.assert_array_equal(deltas_to_waypoints(np.zeros((8, 2)), (0.3, 0.4)), np.tile([0.3, 0.4], (8, 1)))
    wps = deltas_to_waypoints(np.tile([0.5, 0.0], (8, 1)), (0.0, 0.0))
    np.testing.assert_allclose(wps, np.c_[np.arange(1, 9) * 0.1, np.zeros(8)], atol=1e-15)
    wps = deltas_to_waypoints(np.ones((8, 2)), (0.9, 0.9))
    assert np.all(wps == 1.0)


def test_waypoint_delta_round_trip(rng):
    start = rng.uniform(0.3, 0.7, size=2)
    d = rng.uniform(-1, 1, size=(8, 2)) * 0.2
    wps = deltas_to_waypoints(d, start)
    np.testing.assert_allclose(waypoints_to_deltas(wps, start), d, atol=1e-12)


def blob_mask():
    g = np.stack(np.meshgrid(np.linspace(0, 1, 15), np.linspace(0, 1, 15)), -1).reshape(-1, 2)
    flags = np.linalg.norm(g - [0.8, 0.8], axis=1) < 0.12
    return InterestMask(flags, 0.4, 1.0, g)


def test_select_best_single_candidate():
    c = [np.tile([0.2, 0.2], (8, 1))]
    i, w = select_best(c, BeliefModel(), blob_mask(), (0.2, 0.2))
    assert i == 0 and np.array_equal(w, c[0])


def test_select_best_prefers_interest_blob():
    start = np.array([0.5, 0.5])
    measured = np.random.default_rng(0).uniform(0.0, 0.35, size=(40, 2))
    belief = BeliefModel(measured, np.zeros(40))
    a = deltas_to_waypoints(np.tile([0.25, 0.25], (8, 1)), start)  # towards (0.8, 0.8)
    b = deltas_to_waypoints(np.tile([-0.25, -0.25], (8, 1)), start)  # into the measured corner
    i, _ = select_best([b, a], belief, blob_mask(), start)
    assert i == 1


def test_candidate_score_matches_recomputation(rng):
    start = np.array([0.5, 0.5])
    belief = BeliefModel(rng.uniform(size=(10, 2)), rng.uniform(size=10))
    mask = blob_mask()
    cands = [deltas_to_waypoints(rng.uniform(-1, 1, (8, 2)), start) for _ in range(5)]
    scores = candidate_scores(cands, belief, mask, start)
    I = mask.interest_points
    for c, sc in zip(cands, scores):
        z = path_samples(start, c, 0.1)[0]
        ref = posterior(belief, I).var.sum() - posterior(condition_variance_only(belief, z), I).var.sum()
        assert abs(sc - ref) < 1e-9


def test_select_best_ties_take_first():
    c = [np.tile([0.1, 0.1], (8, 1))] * 3
    i, _ = select_best(c, BeliefModel(), blob_mask(), (0.1, 0.1))
    assert i == 0


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx(0.5 * (1e-3 + 1e-5))


def test_train_bc_reduces_loss():
    rng = np.random.default_rng(0)
    nets = PolicyNetworks(SMALL, seed=0)
    obs = one_obs(rng, b=4)
    acts = rng.uniform(-1, 1, size=(4, 8, 2))
    s = NoiseSchedule.linear()
    before = np.mean([bc_loss(nets, obs, acts, s, np.random.default_rng(i), draws=8).item() for i in range(5)])
    train_bc(nets, lambda r: (obs, acts), s, BCConfig(steps=300, draws=4, lr=3e-3), rng)
    after = np.mean([bc_loss(nets, obs, acts, s, np.random.default_rng(i), draws=8).item() for i in range(5)])
    assert after < 0.7 * before
