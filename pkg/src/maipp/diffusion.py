"""DDPM action diffusion: noise schedule, noise-prediction loss, reverse sampling.

Actions are sequences of ``T_p`` planar steps normalised by ``max_step`` so
each component lies in [-1, 1]. The network is trained to predict the noise
added to a demonstration sequence and sampled with the ancestral DDPM chain.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .env import path_samples, truncate_path
from .gp import BeliefModel, GainEvaluator, InterestMask
from .nets import ObsBatch, PolicyNetworks

log = logging.getLogger(__name__)

MAX_STEP = 0.2


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[k-1] is β_k

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or len(b) == 0:
            raise ValueError("schedule needs at least one step")
        if not (np.all(b > 0) and np.all(b < 1) and np.all(np.diff(b) >= 0)):
            raise ValueError("betas must be non-decreasing in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, steps: int = 20, beta_start: float = 1e-4, beta_end: float = 0.5) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def K(self) -> int:
        return len(self.betas)

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])

    def alpha(self, k: int) -> float:
        return 1.0 - self.beta(k)

    @property
    def alpha_bars(self) -> np.ndarray:
        """ᾱ_0 … ᾱ_K as a running product (ᾱ_0 = 1)."""
        out = np.ones(self.K + 1)
        for k in range(1, self.K + 1):
            out[k] = out[k - 1] * (1.0 - self.betas[k - 1])
        return out

    def alpha_bar(self, k) -> np.ndarray | float:
        return self.alpha_bars[k]

    def sigma(self, k: int) -> float:
        """Posterior standard deviation of the reverse step k → k−1."""
        ab = self.alpha_bars
        return math.sqrt(self.beta(k) * (1.0 - ab[k - 1]) / (1.0 - ab[k]))


def forward_noise(delta0, k, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Δᵏ = √ᾱ_k Δ⁰ + √(1−ᾱ_k) ε (``k`` may be per-sample)."""
    ab = np.asarray(schedule.alpha_bar(np.asarray(k)), dtype=float)
    d0 = np.asarray(delta0, dtype=float)
    ab = ab.reshape(ab.shape + (1,) * (d0.ndim - ab.ndim))
    return np.sqrt(ab) * d0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def reverse_mean(x_k: np.ndarray, eps_pred: np.ndarray, k: int, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(k)
    return (x_k - schedule.beta(k) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(schedule.alpha(k))


# ----------------------------------------------------------------------------- training loss


def bc_loss(
    nets: PolicyNetworks,
    batch: ObsBatch,
    actions: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    draws: int = 1,
) -> ad.Tensor:
    """Noise-prediction MSE with k ~ U{1..K} and ε ~ N(0, I), ``draws`` noise draws per record."""
    actions = np.asarray(actions, dtype=float)
    if len(actions) == 0:
        raise ValueError("bc_loss: empty batch")
    n = len(actions)
    rep = np.repeat(np.arange(n), draws)
    k = rng.integers(1, schedule.K + 1, size=len(rep))
    eps = rng.standard_normal((len(rep),) + actions.shape[1:])
    noisy = forward_noise(actions[rep], k, eps, schedule)
    s_hat = nets.encode_actor(batch)
    if draws > 1:
        s_hat = ad.gather(s_hat, rep, axis=0)
    return ad.mse(nets.eps(s_hat, noisy, k), eps)


# ----------------------------------------------------------------------------- sampling


@dataclass
class Chain:
    """Intermediate states of a batch of reverse chains: ``states[k]`` is Δᵏ, shape (n, T, 2)."""

    states: dict[int, np.ndarray]

    @property
    def final(self) -> np.ndarray:
        return self.states[0]


def sample_chain(
    nets: PolicyNetworks,
    batch: ObsBatch,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_candidates: int = 5,
    early_nets: PolicyNetworks | None = None,
    late_steps: int = 0,
    std_fn: Callable[[int], float] | None = None,
) -> Chain:
    """Run ``n_candidates`` reverse chains from pure noise for a single observation.

    Steps k > ``late_steps`` use ``early_nets`` when given (a frozen copy during
    fine-tuning). ``std_fn`` overrides the per-step noise scale; the default is
    the DDPM posterior σ_k, which is zero at k = 1. The final sample is
    clamped to [-1, 1].
    """
    if len(batch) != 1:
        raise ValueError("sample_chain expects a single observation")
    cfg = nets.config.denoiser
    rep = np.zeros(n_candidates, dtype=np.intp)
    s_main = nets.encode_actor(batch).data[rep]
    s_early = s_main if early_nets is None else early_nets.encode_actor(batch).data[rep]
    x = rng.standard_normal((n_candidates, cfg.horizon, cfg.action_dim))
    states = {schedule.K: x}
    for k in range(schedule.K, 0, -1):
        early = early_nets is not None and k > late_steps
        model, s_hat = (early_nets, s_early) if early else (nets, s_main)
        eps = model.eps(s_hat, x, np.full(n_candidates, k)).data
        mean = reverse_mean(x, eps, k, schedule)
        std = schedule.sigma(k) if std_fn is None else std_fn(k)
        if std > 0:
            x = mean + std * rng.standard_normal(mean.shape)
        else:
            x = mean
        states[k - 1] = x
    states[0] = np.clip(states[0], -1.0, 1.0)
    return Chain(states)


def sample_actions(
    nets: PolicyNetworks,
    batch: ObsBatch,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_candidates: int = 5,
) -> list[np.ndarray]:
    final = sample_chain(nets, batch, schedule, rng, n_candidates).final
    return [final[i] for i in range(n_candidates)]


def deltas_to_waypoints(delta, current_position, max_step: float = MAX_STEP) -> np.ndarray:
    d = np.clip(np.asarray(delta, dtype=float).reshape(-1, 2), -1.0, 1.0) * max_step
    return np.clip(np.asarray(current_position, dtype=float) + np.cumsum(d, axis=0), 0.0, 1.0)


def waypoints_to_deltas(waypoints, current_position, max_step: float = MAX_STEP) -> np.ndarray:
    w = np.vstack([np.asarray(current_position, dtype=float).reshape(1, 2), np.asarray(waypoints, dtype=float).reshape(-1, 2)])
    return np.diff(w, axis=0) / max_step


def candidate_scores(
    candidates: Sequence[np.ndarray],
    belief: BeliefModel,
    interest_mask: InterestMask,
    start,
    remaining_budget: float | None = None,
    interval: float = 0.1,
) -> np.ndarray:
    """Interest-region trace reduction from hallucinated samples along each waypoint list."""
    evaluator = GainEvaluator(belief, interest_mask.interest_points)
    scores = []
    for wps in candidates:
        if remaining_budget is not None:
            wps = truncate_path(start, wps, remaining_budget)
        z, _ = path_samples(start, wps, interval) if len(wps) else (np.zeros((0, 2)), None)
        scores.append(evaluator.gain(z))
    return np.asarray(scores)


def select_best(
    candidates: Sequence[np.ndarray],
    belief: BeliefModel,
    interest_mask: InterestMask,
    start,
    remaining_budget: float | None = None,
    interval: float = 0.1,
) -> tuple[int, np.ndarray]:
    """Index and waypoints of the highest-scoring candidate (first index on ties)."""
    if len(candidates) == 0:
        raise ValueError("select_best: no candidates")
    scores = candidate_scores(candidates, belief, interest_mask, start, remaining_budget, interval)
    i = int(np.argmax(scores))
    return i, np.asarray(candidates[i])


# ----------------------------------------------------------------------------- behaviour cloning


@dataclass(frozen=True)
class BCConfig:
    steps: int = 2000
    batch_size: int = 32
    draws: int = 1
    lr: float = 1e-3
    lr_final: float = 1e-5
    grad_clip: float = 1.0
    log_every: int = 100


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    frac = min(step / max(total, 1), 1.0)
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * frac))


def train_bc(
    nets: PolicyNetworks,
    batches: Callable[[np.random.Generator], tuple[ObsBatch, np.ndarray]],
    schedule: NoiseSchedule,
    config: BCConfig,
    rng: np.random.Generator,
    on_log: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Adam on the noise-prediction loss; ``batches(rng)`` returns the next minibatch."""
    losses = []
    t0 = time.perf_counter()
    for step in range(config.steps):
        obs, actions = batches(rng)
        nets.actor.zero_grad()
        with ad.Tape():
            loss = bc_loss(nets, obs, actions, schedule, rng, config.draws)
        ad.backward(loss)
        ad.clip_grad_norm(nets.actor, config.grad_clip)
        ad.adam_step(nets.actor, cosine_lr(step, config.steps, config.lr, config.lr_final))
        losses.append(loss.item())
        if on_log is not None and (step % config.log_every == 0 or step == config.steps - 1):
            on_log(step, float(np.mean(losses[-config.log_every :])))
    log.info("bc: %d steps in %.1fs, final loss %.4f", config.steps, time.perf_counter() - t0, losses[-1])
    return losses
