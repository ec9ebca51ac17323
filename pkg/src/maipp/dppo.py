"""PPO fine-tuning of the diffusion policy over its denoising chain.

Each environment decision expands into ``k_ft`` transitions, one per
fine-tuned reverse step k = k_ft … 1, whose action is the next chain state
Δᵏ⁻¹ drawn from a Gaussian around the DDPM reverse mean. The earlier reverse
steps are run by a frozen copy of the pre-trained actor and are not part of
the optimisation. Rewards are sparse: an agent receives
``-alpha * (trace_final / trace_initial) ** beta`` once, when its budget is
spent.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule
from .episode import DiffusionPlanner, EpisodeConfig, EpisodeResult, build_env, run_episode
from .nets import PolicyNetworks, stack_observations
from .roadmap import Observation

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "mean_terminal_reward", "policy_loss", "critic_loss", "clip_fraction", "wall_seconds", "validation_reward")


class DivergenceError(RuntimeError):
    pass


def terminal_reward(trace_final: float, trace_initial: float, alpha: float = 5.0, beta: float = 0.5) -> float:
    if not trace_initial > 0:
        raise ValueError(f"terminal_reward: initial trace must be positive, got {trace_initial}")
    if trace_final < 0:
        raise ValueError(f"terminal_reward: final trace must be non-negative, got {trace_final}")
    return -alpha * (trace_final / trace_initial) ** beta


def gae(rewards, values, gamma: float = 0.99, lam: float = 0.95, discounts=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns.

    ``values`` carries one bootstrap entry beyond ``rewards``. ``discounts``
    optionally replaces γ per step (the discount between t and t+1).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(v) != len(r) + 1:
        raise ValueError(f"gae: need len(values) == len(rewards) + 1, got {len(v)} and {len(r)}")
    g = np.full(len(r), gamma) if discounts is None else np.asarray(discounts, dtype=float)
    if len(g) != len(r):
        raise ValueError("gae: discounts must match rewards")
    adv = np.zeros(len(r))
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + g[t] * v[t + 1] - v[t]
        acc = delta + g[t] * lam * acc
        adv[t] = acc
    return adv, adv + v[:-1]


def ppo_clip_loss(logp_new, logp_old, advantages, clip: float = 0.2) -> tuple[ad.Tensor, float]:
    """Clipped surrogate loss −mean(min(rA, clip(r)A)) and the fraction of clipped ratios."""
    logp_new = ad.as_tensor(logp_new)
    old = np.asarray(logp_old, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    if not (logp_new.shape == old.shape == adv.shape):
        raise ValueError("ppo_clip_loss: inputs must have equal lengths")
    ratio = ad.exp(logp_new - old)
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -ad.mean(ad.minimum(unclipped, clipped))
    frac = float(np.mean(np.abs(ratio.data - 1.0) > clip))
    return loss, frac


def critic_loss(values_pred, returns) -> ad.Tensor:
    return ad.mse(values_pred, np.asarray(returns, dtype=float))


def reverse_coefficients(k: np.ndarray, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (1/√α_k, β_k/(√α_k √(1−ᾱ_k))) so that mean = a·Δᵏ − b·ε."""
    k = np.asarray(k)
    betas = schedule.betas[k - 1]
    ab = schedule.alpha_bars[k]
    a = 1.0 / np.sqrt(1.0 - betas)
    return a, a * betas / np.sqrt(1.0 - ab)


def denoise_logprob(x_k, x_prev, eps_pred, k, schedule: NoiseSchedule, std) -> ad.Tensor:
    """Log-density of Δᵏ⁻¹ under N(reverse mean, std²·I), one value per row.

    Works on single sequences (T, 2) or batches (B, T, 2) with per-row ``k``
    and ``std``; differentiable in ``eps_pred``.
    """
    x_k = np.asarray(x_k, dtype=float)
    single = x_k.ndim == 2
    if single:
        x_k = x_k[None]
        x_prev = np.asarray(x_prev, dtype=float)[None]
        eps_pred = ad.as_tensor(eps_pred).reshape(1, *x_k.shape[1:])
    n = len(x_k)
    k = np.broadcast_to(np.asarray(k), (n,))
    std = np.broadcast_to(np.asarray(std, dtype=float), (n,))
    a, b = reverse_coefficients(k, schedule)
    mean = ad.as_tensor(a[:, None, None] * x_k) - ad.as_tensor(eps_pred) * b[:, None, None]
    z = (ad.as_tensor(np.asarray(x_prev, dtype=float)) - mean) * (1.0 / std)[:, None, None]
    d = x_k[0].size
    quad = ad.sum_(ad.reshape(z * z, (n, d)), axis=1)
    out = quad * -0.5 - (0.5 * d * np.log(2.0 * np.pi * std**2))
    return out.reshape(()) if single else out


# ----------------------------------------------------------------------------- rollouts


@dataclass(frozen=True)
class FinetuneConfig:
    k_ft: int = 10
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    min_std: float = 0.1
    epochs: int = 4
    minibatch: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    grad_clip: float = 1.0
    iterations: int = 10
    envs_per_iteration: int = 4
    validation_envs: int = 8
    n_candidates: int = 5
    reward_alpha: float = 5.0
    reward_beta: float = 0.5
    divergence: float = 10.0
    critic_warmup_iterations: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k_ft < 1:
            raise ValueError("k_ft must be at least 1")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")


def policy_std(k: int, schedule: NoiseSchedule, min_std: float) -> float:
    return max(schedule.sigma(k), min_std)


@dataclass
class RolloutBuffer:
    observations: list[Observation]
    obs_index: np.ndarray  # (N,) transition → observation
    k: np.ndarray
    x_k: np.ndarray  # (N, T, 2)
    x_prev: np.ndarray
    logp_old: np.ndarray
    std: np.ndarray
    values: np.ndarray  # per observation
    rewards: np.ndarray  # per transition
    advantages: np.ndarray  # per transition, normalised
    returns: np.ndarray  # per observation
    terminal_rewards: list[float]
    episodes: list[EpisodeResult] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.k)


def episode_terminal_rewards(result: EpisodeResult, config: FinetuneConfig) -> dict[int, float]:
    return {
        i: terminal_reward(tr, result.initial_trace, config.reward_alpha, config.reward_beta)
        for i, tr in sorted(result.depletion_traces.items())
    }


def _values(nets: PolicyNetworks, obs: list[Observation], chunk: int = 64) -> np.ndarray:
    out = [nets.value(stack_observations(obs[s : s + chunk])).data for s in range(0, len(obs), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def _logprobs(nets: PolicyNetworks, buf_obs, obs_index, k, x_k, x_prev, std, schedule) -> ad.Tensor:
    uniq, inv = np.unique(obs_index, return_inverse=True)
    s_hat = ad.gather(nets.encode_actor(stack_observations([buf_obs[j] for j in uniq])), inv.reshape(-1), axis=0)
    eps = nets.eps(s_hat, x_k, k)
    return denoise_logprob(x_k, x_prev, eps, k, schedule, std)


def rollout(
    env_seeds: list[int],
    nets: PolicyNetworks,
    frozen: PolicyNetworks,
    schedule: NoiseSchedule,
    config: FinetuneConfig,
    episode_config: EpisodeConfig,
    rng_stream: int = 0,
) -> RolloutBuffer:
    if config.k_ft > schedule.K:
        raise ValueError("k_ft exceeds the number of diffusion steps")
    std_fn = lambda k: policy_std(k, schedule, config.min_std)  # noqa: E731
    planner = DiffusionPlanner(nets, schedule, config.n_candidates, frozen, config.k_ft, std_fn, record_chain=True)
    observations: list[Observation] = []
    obs_index, ks, xk, xp, stds, rewards = [], [], [], [], [], []
    first_transition: dict[int, int] = {}
    agent_decisions: list[list[int]] = []
    terminal: list[float] = []
    episodes = []
    for seed in env_seeds:
        env = build_env(seed, episode_config)
        res = run_episode(env, planner, episode_config, rng_stream=rng_stream)
        episodes.append(res)
        term = episode_terminal_rewards(res, config)
        terminal.extend(term.values())
        by_agent: dict[int, list[int]] = {}
        for rec in res.decisions:
            oid = len(observations)
            observations.append(rec.observation)
            by_agent.setdefault(rec.agent_id, []).append(oid)
            first_transition[oid] = len(ks)
            chain = rec.plan.info["chain"]
            for k in range(config.k_ft, 0, -1):
                obs_index.append(oid)
                ks.append(k)
                xk.append(chain[k])
                xp.append(chain[k - 1])
                stds.append(std_fn(k))
                rewards.append(0.0)
        for agent, oids in sorted(by_agent.items()):
            # the last transition (k = 1) of the agent's final decision closes its episode
            rewards[first_transition[oids[-1]] + config.k_ft - 1] = term[agent]
            agent_decisions.append(oids)
    values = _values(nets, observations)
    rewards_arr = np.asarray(rewards)
    obs_adv = np.zeros(len(observations))
    obs_ret = np.zeros(len(observations))
    for oids in agent_decisions:
        r = [rewards_arr[first_transition[o] : first_transition[o] + config.k_ft].sum() for o in oids]
        a, ret = gae(r, np.concatenate([values[oids], [0.0]]), config.gamma, config.lam)
        obs_adv[oids] = a
        obs_ret[oids] = ret
    obs_index = np.asarray(obs_index, dtype=np.intp)
    adv = obs_adv[obs_index]
    if len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ks_arr = np.asarray(ks, dtype=np.intp)
    xk_arr, xp_arr, std_arr = np.asarray(xk), np.asarray(xp), np.asarray(stds)
    logp = np.concatenate([
        _logprobs(nets, observations, obs_index[s : s + 256], ks_arr[s : s + 256], xk_arr[s : s + 256], xp_arr[s : s + 256], std_arr[s : s + 256], schedule).data
        for s in range(0, len(ks_arr), 256)
    ]) if len(ks_arr) else np.zeros(0)
    return RolloutBuffer(observations, obs_index, ks_arr, xk_arr, xp_arr, logp, std_arr, values, rewards_arr, adv, obs_ret, terminal, episodes)


# ----------------------------------------------------------------------------- evaluation and training


def mean_terminal_reward(
    nets: PolicyNetworks,
    schedule: NoiseSchedule,
    env_seeds: list[int],
    episode_config: EpisodeConfig,
    config: FinetuneConfig,
) -> float:
    """Average terminal reward per agent under the standard DDPM sampler."""
    planner = DiffusionPlanner(nets, schedule, config.n_candidates)
    rewards = []
    for seed in env_seeds:
        res = run_episode(build_env(seed, episode_config), planner, episode_config)
        rewards.extend(episode_terminal_rewards(res, config).values())
    return float(np.mean(rewards))


@dataclass
class UpdateStats:
    policy_loss: float
    critic_loss: float
    clip_fraction: float
    mean_abs_ratio_dev: float
    first_epoch_max_ratio_dev: float


def ppo_update(nets: PolicyNetworks, buf: RolloutBuffer, schedule: NoiseSchedule, config: FinetuneConfig, rng: np.random.Generator, train_actor: bool = True) -> UpdateStats:
    pl, cl, cf, dev = [], [], [], []
    first_dev = 0.0
    n = len(buf)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.minibatch):
            idx = order[s : s + config.minibatch]
            oids = buf.obs_index[idx]
            uniq = np.unique(oids)
            nets.actor.zero_grad()
            nets.critic.zero_grad()
            with ad.Tape():
                logp = _logprobs(nets, buf.observations, oids, buf.k[idx], buf.x_k[idx], buf.x_prev[idx], buf.std[idx], schedule)
                ratio_dev = np.abs(np.expm1(np.minimum(logp.data - buf.logp_old[idx], 50.0)))
                if epoch == 0 and s == 0:
                    first_dev = float(ratio_dev.max())
                if float(ratio_dev.mean()) > config.divergence:
                    raise DivergenceError(f"mean |ratio - 1| = {ratio_dev.mean():.3g} exceeds {config.divergence}")
                p_loss, frac = ppo_clip_loss(logp, buf.logp_old[idx], buf.advantages[idx], config.clip)
                v_pred = nets.value(stack_observations([buf.observations[j] for j in uniq]))
                c_loss = critic_loss(v_pred, buf.returns[uniq])
                total = (p_loss if train_actor else 0.0) + c_loss
            ad.backward(total)
            if train_actor:
                ad.clip_grad_norm(nets.actor, config.grad_clip)
                ad.adam_step(nets.actor, config.actor_lr)
            ad.clip_grad_norm(nets.critic, config.grad_clip)
            ad.adam_step(nets.critic, config.critic_lr)
            pl.append(p_loss.item())
            cl.append(c_loss.item())
            cf.append(frac)
            dev.append(float(ratio_dev.mean()))
    return UpdateStats(float(np.mean(pl)), float(np.mean(cl)), float(np.mean(cf)), float(np.mean(dev)), first_dev)


@dataclass
class FinetuneOutcome:
    nets: PolicyNetworks
    best_iteration: int
    log: list[dict]


def finetune(
    nets: PolicyNetworks,
    schedule: NoiseSchedule,
    config: FinetuneConfig,
    episode_config: EpisodeConfig,
    log_path: str | Path | None = None,
    train_seed_base: int = 0,
    validation_seeds: list[int] | None = None,
) -> FinetuneOutcome:
    """Alternate rollouts and PPO epochs; return the best checkpoint on validation seeds.

    Iteration 0 (the unmodified input) is a candidate, so zero iterations
    returns the input weights unchanged.
    """
    from .dataset import VALIDATION_SEED_BASE

    if validation_seeds is None:
        validation_seeds = [VALIDATION_SEED_BASE + i for i in range(config.validation_envs)]
    frozen = nets.copy()
    current = nets.copy()
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    best_val = mean_terminal_reward(current, schedule, validation_seeds, episode_config, config) if config.iterations else math.nan
    best, best_it = current.copy(), 0
    rows = [{"iteration": 0, "mean_terminal_reward": math.nan, "policy_loss": math.nan, "critic_loss": math.nan,
             "clip_fraction": math.nan, "wall_seconds": time.perf_counter() - t0, "validation_reward": best_val}]
    for it in range(1, config.iterations + 1):
        seeds = [train_seed_base + (it - 1) * config.envs_per_iteration + j for j in range(config.envs_per_iteration)]
        buf = rollout(seeds, current, frozen, schedule, config, episode_config, rng_stream=it)
        stats = ppo_update(current, buf, schedule, config, rng, train_actor=it > config.critic_warmup_iterations)
        val = mean_terminal_reward(current, schedule, validation_seeds, episode_config, config)
        row = {
            "iteration": it,
            "mean_terminal_reward": float(np.mean(buf.terminal_rewards)),
            "policy_loss": stats.policy_loss,
            "critic_loss": stats.critic_loss,
            "clip_fraction": stats.clip_fraction,
            "wall_seconds": time.perf_counter() - t0,
            "validation_reward": val,
        }
        rows.append(row)
        log.info("finetune it %d: train reward %.3f val %.3f clip %.3f", it, row["mean_terminal_reward"], val, stats.clip_fraction)
        if val > best_val:
            best_val, best, best_it = val, current.copy(), it
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow(r)
    return FinetuneOutcome(best, best_it, rows)


def config_dict(config: FinetuneConfig) -> dict:
    return asdict(config)
