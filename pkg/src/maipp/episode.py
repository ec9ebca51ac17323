"""Multi-agent episode runner shared by data collection, fine-tuning and evaluation.

At every decision the acting agent fits the GP belief to the team's pooled
measurements, recomputes the interest region on the evaluation grid, plans,
executes the first ``execute`` waypoints and publishes its intent.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import env as E
from .diffusion import MAX_STEP, NoiseSchedule, deltas_to_waypoints, sample_chain, select_best, waypoints_to_deltas
from .gp import BeliefModel, InterestMask, KernelParams, PosteriorField, cov_trace, interest_set, posterior, uniform_grid
from .intent import AccumulatedIntent, fit_intent, fuse_intents, intent_from_candidates
from .nets import PolicyNetworks, stack_observations
from .planners import PlannerParams, padded_plan, random_walk_plan, sga_plan
from .roadmap import AgentFeatures, Observation, RoadmapGraph, SpectralEncoding, build_observation, build_prm, spectral_encoding

log = logging.getLogger(__name__)

MIN_MOVE = 1e-6


@dataclass(frozen=True)
class EpisodeConfig:
    n_agents: int = 3
    budget: float = 3.0
    start: tuple[float, float] = (0.5, 0.5)
    noise_std: float = 0.01
    interval: float = 0.1
    grid_res: int = 30
    mu_th: float = 0.4
    beta_ucb: float = 1.0
    prm_nodes: int = 200
    prm_k: int = 20
    horizon: int = 8
    execute: int = 2
    max_decisions: int = 100
    field_components: tuple[int, int] = (8, 12)
    lengthscale: float = 0.125

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if not 1 <= self.execute <= self.horizon:
            raise ValueError("execute must lie in [1, horizon]")

    @property
    def kernel(self) -> KernelParams:
        return KernelParams(self.lengthscale, 1.0, self.noise_std**2)

    @property
    def grid(self) -> np.ndarray:
        return uniform_grid(self.grid_res)


@dataclass(frozen=True)
class EnvInstance:
    seed: int
    field: E.GroundTruthField
    graphs: tuple[RoadmapGraph, ...]
    encodings: tuple[SpectralEncoding, ...]


def prm_seed(env_seed: int, agent_id: int) -> int:
    return int(np.random.SeedSequence([env_seed, agent_id, 7]).generate_state(1)[0])


def build_env(seed: int, config: EpisodeConfig, with_graphs: bool = True) -> EnvInstance:
    """Field and per-agent roadmaps; everything is a function of ``seed`` alone."""
    fld = E.generate_field(seed, config.field_components)
    graphs, encs = [], []
    if with_graphs:
        for i in range(config.n_agents):
            g = build_prm(prm_seed(seed, i), config.prm_nodes, config.prm_k)
            graphs.append(g)
            encs.append(spectral_encoding(g))
    return EnvInstance(seed, fld, tuple(graphs), tuple(encs))


@dataclass
class DecisionContext:
    state: E.EpisodeState
    agent_id: int
    env: EnvInstance
    config: EpisodeConfig
    belief: BeliefModel
    grid_post: PosteriorField
    mask: InterestMask
    fused: AccumulatedIntent
    observation: Observation | None
    rng: np.random.Generator
    decision_index: int

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.state.agents[self.agent_id].position)

    @property
    def remaining(self) -> float:
        return self.state.remaining(self.agent_id)


@dataclass
class PlanResult:
    waypoints: np.ndarray  # T_p waypoints after the current position
    intent_points: np.ndarray | list
    info: dict = field(default_factory=dict)


class Planner(Protocol):
    name: str
    needs_observation: bool

    def plan(self, ctx: DecisionContext) -> PlanResult: ...


# ----------------------------------------------------------------------------- planners


@dataclass
class RigTreeSGAPlanner:
    params: PlannerParams = PlannerParams()
    name: str = "rigtree_sga"
    needs_observation: bool = False

    def plan(self, ctx: DecisionContext) -> PlanResult:
        st = ctx.state
        team = [j for j, a in enumerate(st.agents) if j <= ctx.agent_id and not a.done and st.remaining(j) > 0]
        starts = {j: np.asarray(st.agents[j].position) for j in team}
        budgets = {j: st.remaining(j) for j in team}
        plans = sga_plan(ctx.belief, team, starts, budgets, ctx.mask, self.params, ctx.rng)
        path = plans[ctx.agent_id]
        wps = padded_plan(ctx.position, path, ctx.config.horizon)
        return PlanResult(wps, wps, {"path": path})


@dataclass
class RandomWalkPlanner:
    step_length: float = 0.2
    name: str = "random_walk"
    needs_observation: bool = False

    def plan(self, ctx: DecisionContext) -> PlanResult:
        wps = random_walk_plan(ctx.position, ctx.remaining, ctx.rng, ctx.config.horizon, self.step_length)
        return PlanResult(wps, wps)


@dataclass
class DiffusionPlanner:
    """Sample candidates from the diffusion policy and execute the most informative one.

    With ``record_chain`` the executed candidate's reverse-chain states
    Δ^{late_steps} … Δ^0 are returned in ``info["chain"]``.
    """

    nets: PolicyNetworks
    schedule: NoiseSchedule
    n_candidates: int = 5
    early_nets: PolicyNetworks | None = None
    late_steps: int = 0
    std_fn: Callable[[int], float] | None = None
    record_chain: bool = False
    name: str = "aid"
    needs_observation: bool = True

    def plan(self, ctx: DecisionContext) -> PlanResult:
        batch = stack_observations([ctx.observation])
        chain = sample_chain(
            self.nets, batch, self.schedule, ctx.rng, self.n_candidates,
            self.early_nets, self.late_steps, self.std_fn,
        )
        cands = [deltas_to_waypoints(d, ctx.position) for d in chain.final]
        idx, wps = select_best(cands, ctx.belief, ctx.mask, ctx.position, ctx.remaining, ctx.config.interval)
        info = {"candidate": idx}
        if self.record_chain:
            info["chain"] = {k: chain.states[k][idx].copy() for k in range(self.late_steps + 1)}
        return PlanResult(wps, cands, info)


# ----------------------------------------------------------------------------- runner


@dataclass
class DecisionRecord:
    agent_id: int
    decision_index: int
    position: np.ndarray
    remaining: float
    observation: Observation | None
    plan: PlanResult
    planning_time: float
    cov_trace: float


@dataclass
class EpisodeResult:
    seed: int
    initial_trace: float
    final_trace: float
    planning_time: float
    decisions: list[DecisionRecord]
    path_lengths: list[float]
    trajectories: list[np.ndarray]
    depletion_traces: dict[int, float]
    final_state: E.EpisodeState

    @property
    def n_decisions(self) -> int:
        return len(self.decisions)


def belief_from_state(state: E.EpisodeState, config: EpisodeConfig) -> BeliefModel:
    X, Y = state.measurement_arrays()
    return BeliefModel(X, Y, config.kernel)


def trace_now(state: E.EpisodeState, config: EpisodeConfig) -> float:
    """Interest-region covariance trace of the team belief, mask recomputed from that belief."""
    post = posterior(belief_from_state(state, config), config.grid)
    return cov_trace(post, interest_set(post, config.mu_th, config.beta_ucb))


def decision_rng(env_seed: int, agent_id: int, decision: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([env_seed, agent_id, decision, stream, 11])


def run_episode(
    env: EnvInstance,
    planner: Planner,
    config: EpisodeConfig,
    rng_stream: int = 0,
    keep_observations: bool = False,
    trace_writer: E.TraceWriter | None = None,
) -> EpisodeResult:
    """Run every agent until its budget is spent.

    Planning time covers what the acting agent computes to decide (belief,
    interest region, observation, planner call) and excludes the simulated
    motion and metric bookkeeping. An agent whose plan does not move it is
    retired, as is one that reaches ``config.max_decisions``.
    """
    state = E.new_episode(env.field, config.n_agents, config.start, config.budget, config.noise_std, config.interval, env.seed)
    grid = config.grid
    initial_trace = trace_now(state, config)
    prev_obs: dict[int, Observation] = {}
    records: list[DecisionRecord] = []
    depletion: dict[int, float] = {}
    planning = 0.0
    use_obs = planner.needs_observation or keep_observations
    while not E.is_complete(state):
        i = E.next_actor(state)
        agent = state.agents[i]
        t0 = time.perf_counter()
        belief = belief_from_state(state, config)
        post = posterior(belief, grid)
        mask = interest_set(post, config.mu_th, config.beta_ucb)
        fused = fuse_intents([it for j, it in enumerate(state.intents) if j != i], grid)
        obs = None
        if use_obs:
            feats = AgentFeatures(agent.position, state.remaining(i), config.mu_th)
            obs = build_observation(env.graphs[i], env.encodings[i], belief, fused, feats, prev_obs.get(i), f"{env.seed}:{i}")
        ctx = DecisionContext(state, i, env, config, belief, post, mask, fused, obs, decision_rng(env.seed, i, agent.decisions, rng_stream), agent.decisions)
        result = planner.plan(ctx)
        dt = time.perf_counter() - t0
        planning += dt

        tr = cov_trace(post, mask)
        records.append(DecisionRecord(i, agent.decisions, np.asarray(agent.position), state.remaining(i), obs, result, dt, tr))
        if trace_writer is not None:
            trace_writer.decision(i, agent.position, result.waypoints, agent.traveled, tr)
        if obs is not None:
            prev_obs[i] = obs
        new_state = E.step_agent(state, i, result.waypoints, config.execute)
        moved = new_state.agents[i].traveled - agent.traveled
        if moved < MIN_MOVE or new_state.agents[i].decisions >= config.max_decisions:
            if moved < MIN_MOVE:
                log.debug("env %d agent %d retired: plan did not move it", env.seed, i)
            new_state = E.retire_agent(new_state, i)
        state = E.publish_intent(new_state, i, _intent(result.intent_points))
        if state.agents[i].done or state.remaining(i) <= E.ODOMETER_TOL:
            depletion[i] = trace_now(state, config)
    final_trace = trace_now(state, config)
    return EpisodeResult(
        env.seed,
        initial_trace,
        final_trace,
        planning,
        records,
        [a.traveled for a in state.agents],
        [np.asarray(a.trajectory) for a in state.agents],
        depletion,
        state,
    )


def _intent(points):
    if isinstance(points, list):
        return intent_from_candidates(points)
    return fit_intent(points)


def demo_action(record: DecisionRecord, max_step: float = MAX_STEP) -> np.ndarray:
    """Normalised delta sequence of the planner's (padded) next waypoints."""
    return waypoints_to_deltas(record.plan.waypoints, record.position, max_step)
