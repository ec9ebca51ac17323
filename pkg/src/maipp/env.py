"""Ground-truth information fields and asynchronous multi-agent episodes.

The domain is the unit square. A field is a max-normalised mixture of
isotropic Gaussian bumps; agents move along straight segments between
waypoints, take a measurement every ``interval`` of travelled distance plus
one at every executed waypoint, and stop exactly when the path-length budget
runs out.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DOMAIN_TOL = 1e-9
ODOMETER_TOL = 1e-9


class DomainError(ValueError):
    """A point lies outside the unit square."""


class EpisodeComplete(Exception):
    """Every agent has exhausted its budget (or retired)."""


def in_domain(p, tol: float = DOMAIN_TOL) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= -tol) and np.all(p <= 1.0 + tol))


def _check_domain(p) -> None:
    if not in_domain(p):
        raise DomainError(f"point(s) outside the unit square: {np.asarray(p).tolist()}")


@dataclass(frozen=True)
class GroundTruthField:
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray
    scale: float = 1.0

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def raw(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        d2 = ((pts[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)
        return (self.weights * np.exp(-0.5 * d2 / self.stds**2)).sum(-1)


def make_field(means, stds, weights, resolution: int = 201) -> GroundTruthField:
    """Field from explicit components, normalised so its maximum is 1.

    The normaliser is the maximum over a dense grid plus the component
    centres; values are clipped to 1 to absorb off-grid overshoot.
    """
    f = GroundTruthField(
        np.asarray(means, dtype=float).reshape(-1, 2),
        np.asarray(stds, dtype=float).reshape(-1),
        np.asarray(weights, dtype=float).reshape(-1),
    )
    c = np.linspace(0.0, 1.0, resolution)
    xx, yy = np.meshgrid(c, c)
    probe = np.vstack([np.column_stack([xx.ravel(), yy.ravel()]), np.clip(f.means, 0.0, 1.0)])
    return dataclasses.replace(f, scale=float(f.raw(probe).max()))


def generate_field(
    seed: int,
    n_components: tuple[int, int] = (8, 12),
    std_range: tuple[float, float] = (0.05, 0.2),
    weight_range: tuple[float, float] = (0.5, 1.0),
) -> GroundTruthField:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_components[0], n_components[1] + 1))
    means = rng.uniform(0.0, 1.0, size=(n, 2))
    stds = rng.uniform(*std_range, size=n)
    weights = rng.uniform(*weight_range, size=n)
    return make_field(means, stds, weights)


def field_value(field: GroundTruthField, p):
    """Normalised field value at one point (scalar) or at an (N, 2) array of points."""
    _check_domain(p)
    v = np.minimum(field.raw(p) / field.scale, 1.0)
    return float(v[0]) if np.asarray(p).ndim == 1 else v


@dataclass(frozen=True)
class Measurement:
    position: tuple[float, float]
    value: float
    agent_id: int = -1
    odometer: float = 0.0


def observe(field: GroundTruthField, p, noise_std: float, rng: np.random.Generator, agent_id: int = -1, odometer: float = 0.0) -> Measurement:
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    p = np.asarray(p, dtype=float)
    value = field_value(field, p)
    if noise_std > 0:
        value += noise_std * rng.standard_normal()
    return Measurement((float(p[0]), float(p[1])), float(value), agent_id, float(odometer))


def path_length(points: Sequence) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total += float(np.hypot(*(b - a)))
    return total


def truncate_path(start, waypoints, budget: float) -> np.ndarray:
    """Waypoints cut so the polyline from ``start`` has length ≤ ``budget``.

    The last kept segment is shortened by linear interpolation. Returns the
    executed waypoints (excluding ``start``); may be empty if ``budget`` ≤ 0.
    """
    pos = np.asarray(start, dtype=float)
    remaining = budget
    out = []
    for w in np.asarray(waypoints, dtype=float).reshape(-1, 2):
        if remaining <= 0:
            break
        seg = float(np.hypot(*(w - pos)))
        if seg > remaining:
            w = pos + (remaining / seg) * (w - pos)
            out.append(w)
            break
        out.append(w)
        remaining -= seg
        pos = w
    return np.asarray(out).reshape(-1, 2)


def path_samples(start, waypoints, interval: float, start_odometer: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Measurement locations along a polyline and their odometer readings.

    One sample at every multiple of ``interval`` crossed (strictly after the
    starting odometer) and one at every waypoint; a crossing that coincides with
    a waypoint is taken once. Zero-length moves add nothing, except that a path
    that never leaves ``start`` yields a single sample there.
    """
    pos = np.asarray(start, dtype=float)
    odo = float(start_odometer)
    pts, odos = [], []
    for w in np.asarray(waypoints, dtype=float).reshape(-1, 2):
        seg = float(np.hypot(*(w - pos)))
        if seg == 0.0:
            continue
        end = odo + seg
        if seg > 0 and interval > 0:
            j = np.floor(odo / interval + ODOMETER_TOL) + 1
            while j * interval < end - ODOMETER_TOL:
                s = j * interval
                pts.append(pos + ((s - odo) / seg) * (w - pos))
                odos.append(s)
                j += 1
        pts.append(w.copy())
        odos.append(end)
        pos, odo = w, end
    if not pts and len(np.asarray(waypoints).reshape(-1, 2)):
        pts, odos = [pos.copy()], [odo]
    return np.asarray(pts).reshape(-1, 2), np.asarray(odos)


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]
    traveled: float = 0.0
    trajectory: tuple = ()
    done: bool = False
    decisions: int = 0


@dataclass(frozen=True)
class EpisodeState:
    field: GroundTruthField
    agents: tuple[AgentState, ...]
    budget: float = 3.0
    measurements: tuple[Measurement, ...] = ()
    intents: tuple = ()
    noise_std: float = 0.01
    interval: float = 0.1
    seed: int = 0

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def remaining(self, agent_id: int) -> float:
        return max(self.budget - self.agents[agent_id].traveled, 0.0)

    def measurement_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.measurements:
            return np.zeros((0, 2)), np.zeros(0)
        return (
            np.array([m.position for m in self.measurements]),
            np.array([m.value for m in self.measurements]),
        )


def new_episode(
    field: GroundTruthField,
    n_agents: int,
    start=(0.5, 0.5),
    budget: float = 3.0,
    noise_std: float = 0.01,
    interval: float = 0.1,
    seed: int = 0,
    initial_measurement: bool = True,
) -> EpisodeState:
    """All agents at a shared start; optionally one measurement at the start."""
    _check_domain(start)
    p = (float(start[0]), float(start[1]))
    agents = tuple(AgentState(p, 0.0, (p,)) for _ in range(n_agents))
    state = EpisodeState(field, agents, budget, (), (None,) * n_agents, noise_std, interval, seed)
    if initial_measurement:
        rng = np.random.default_rng([seed, 0, 0, 0])
        state = dataclasses.replace(state, measurements=(observe(field, p, noise_std, rng, 0, 0.0),))
    return state


def step_agent(state: EpisodeState, agent_id: int, waypoints, execute_count: int) -> EpisodeState:
    """Move ``agent_id`` along its first ``execute_count`` waypoints, measuring on the way."""
    wps = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(wps) == 0:
        raise ValueError("step_agent: empty waypoint list")
    if execute_count < 1:
        raise ValueError("step_agent: execute_count must be ≥ 1")
    _check_domain(wps)
    wps = np.clip(wps[:execute_count], 0.0, 1.0)
    agent = state.agents[agent_id]
    executed = truncate_path(agent.position, wps, state.remaining(agent_id))
    if len(executed) == 0:
        executed = np.asarray([agent.position])
    pts, odos = path_samples(agent.position, executed, state.interval, agent.traveled)
    base = len([m for m in state.measurements if m.agent_id == agent_id])
    new_meas = []
    for i, (p, o) in enumerate(zip(pts, odos)):
        rng = np.random.default_rng([state.seed, agent_id + 1, base + i, 1])
        new_meas.append(observe(state.field, np.clip(p, 0.0, 1.0), state.noise_std, rng, agent_id, o))
    traveled = agent.traveled
    pos = np.asarray(agent.position)
    for w in executed:
        traveled += float(np.hypot(*(w - pos)))
        pos = w
    traj = agent.trajectory + tuple((float(w[0]), float(w[1])) for w in executed)
    done = agent.done or traveled >= state.budget - ODOMETER_TOL
    new_agent = AgentState((float(pos[0]), float(pos[1])), traveled, traj, done, agent.decisions + 1)
    agents = state.agents[:agent_id] + (new_agent,) + state.agents[agent_id + 1 :]
    return dataclasses.replace(state, agents=agents, measurements=state.measurements + tuple(new_meas))


def retire_agent(state: EpisodeState, agent_id: int) -> EpisodeState:
    a = dataclasses.replace(state.agents[agent_id], done=True)
    return dataclasses.replace(state, agents=state.agents[:agent_id] + (a,) + state.agents[agent_id + 1 :])


def publish_intent(state: EpisodeState, agent_id: int, intent) -> EpisodeState:
    intents = list(state.intents)
    intents[agent_id] = intent
    return dataclasses.replace(state, intents=tuple(intents))


def is_complete(state: EpisodeState) -> bool:
    return all(a.done or a.traveled >= state.budget - ODOMETER_TOL for a in state.agents)


def next_actor(state: EpisodeState) -> int:
    """Active agent with the least distance travelled; ties go to the lowest index."""
    best, best_t = -1, np.inf
    for i, a in enumerate(state.agents):
        if a.done or a.traveled >= state.budget - ODOMETER_TOL:
            continue
        if a.traveled < best_t:
            best, best_t = i, a.traveled
    if best < 0:
        raise EpisodeComplete("all agents have exhausted their budgets")
    return best


class TraceWriter:
    """JSONL episode trace: a header record then one record per decision."""

    def __init__(self, path: str | Path, seed: int, config: dict) -> None:
        self._fh = open(path, "w")
        self._write({"type": "header", "seed": seed, "config": config})

    def _write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def decision(self, agent_id: int, position, waypoints, odometer: float, cov_trace: float) -> None:
        self._write({
            "type": "decision",
            "agent_id": int(agent_id),
            "position": [float(v) for v in position],
            "waypoints": np.asarray(waypoints, dtype=float).reshape(-1, 2).tolist(),
            "odometer": float(odometer),
            "cov_trace": float(cov_trace),
        })

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
