"""Classical informative planners: RIG-tree, sequential greedy assignment, random walk.

The tree planner scores every node by the variance-only trace reduction over
the current interest region that measurements along its root-to-node path
would produce, and returns the path to the highest-scoring node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import path_samples
from .gp import BeliefModel, GainEvaluator, InterestMask, condition_variance_only

GAIN_TIE_TOL = 1e-12


@dataclass(frozen=True)
class PlannerParams:
    steer_step: float = 0.2
    samples_per_plan: int = 300
    interval: float = 0.1
    # > 0 also branches from every tree node within this radius (RIG-tree style)
    near_radius: float = 0.0
    # optional finite sampling set; None samples the unit square
    candidate_points: np.ndarray | None = None
    horizon: int = 8

    def __post_init__(self) -> None:
        if not self.steer_step > 0:
            raise ValueError("steer_step must be positive")
        if self.samples_per_plan < 1:
            raise ValueError("samples_per_plan must be at least 1")


@dataclass
class RigTree:
    positions: list = field(default_factory=list)
    parents: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    # per node: hallucinated samples on the edge from its parent and their cached GP rows
    edge_samples: list = field(default_factory=list)
    edge_rows: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)

    def add(self, pos, parent: int, cost: float, gain: float, samples, rows) -> int:
        self.positions.append(np.asarray(pos, dtype=float))
        self.parents.append(parent)
        self.costs.append(cost)
        self.gains.append(gain)
        self.edge_samples.append(samples)
        self.edge_rows.append(rows)
        return len(self.positions) - 1

    def path_to(self, i: int) -> np.ndarray:
        out = []
        while i >= 0:
            out.append(self.positions[i])
            i = self.parents[i]
        return np.asarray(out[::-1])

    def ancestry(self, i: int) -> list[int]:
        out = []
        while i > 0:
            out.append(i)
            i = self.parents[i]
        return out[::-1]

    def best(self) -> int:
        """Index of the maximal-gain node; ties by lower cost, then lower index."""
        g = np.asarray(self.gains)
        top = g.max()
        cands = np.flatnonzero(g >= top - GAIN_TIE_TOL)
        c = np.asarray(self.costs)[cands]
        return int(cands[np.flatnonzero(c == c.min())[0]])


def _steer(near: np.ndarray, target: np.ndarray, step: float) -> np.ndarray:
    d = target - near
    dist = float(np.hypot(*d))
    if dist <= step:
        return target.copy()
    return near + d * (step / dist)


def grow_rigtree(
    belief: BeliefModel,
    interest_mask: InterestMask,
    start,
    remaining_budget: float,
    params: PlannerParams,
    rng: np.random.Generator,
) -> RigTree:
    start = np.asarray(start, dtype=float)
    tree = RigTree()
    tree.add(start, -1, 0.0, 0.0, np.zeros((0, 2)), None)
    if remaining_budget < params.steer_step / 10:
        return tree
    evaluator = GainEvaluator(belief, interest_mask.interest_points)
    children: dict[int, list[np.ndarray]] = {0: []}

    def extend(parent: int, pos: np.ndarray) -> None:
        ppos = tree.positions[parent]
        seg = float(np.hypot(*(pos - ppos)))
        if seg == 0.0:
            return
        cost = tree.costs[parent] + seg
        if cost > remaining_budget:
            return
        if any(np.array_equal(pos, c) for c in children[parent]):
            return
        samples, _ = path_samples(ppos, pos[None, :], params.interval, tree.costs[parent])
        rows = evaluator.rows(samples)
        chain = tree.ancestry(parent)
        zs = [tree.edge_samples[j] for j in chain] + [samples]
        vz = [tree.edge_rows[j][0] for j in chain] + [rows[0]]
        pz = [tree.edge_rows[j][1] for j in chain] + [rows[1]]
        gain = evaluator.gain_from_rows(np.vstack(zs), np.hstack(vz), np.vstack(pz))
        idx = tree.add(pos, parent, cost, gain, samples, rows)
        children[parent].append(pos)
        children[idx] = []

    for _ in range(params.samples_per_plan):
        if params.candidate_points is not None:
            cp = np.asarray(params.candidate_points, dtype=float).reshape(-1, 2)
            target = cp[rng.integers(len(cp))]
        else:
            target = rng.uniform(0.0, 1.0, size=2)
        pos_arr = np.asarray(tree.positions)
        d = np.hypot(*(pos_arr - target).T)
        nearest = int(np.argmin(d))
        new = _steer(tree.positions[nearest], target, params.steer_step)
        if params.near_radius > 0:
            dn = np.hypot(*(np.asarray(tree.positions) - new).T)
            parents = [int(i) for i in np.flatnonzero(dn <= params.near_radius)]
        else:
            parents = [nearest]
        for parent in parents:
            extend(parent, new)
    return tree


def rigtree_plan(
    belief: BeliefModel,
    interest_mask: InterestMask,
    start,
    remaining_budget: float,
    params: PlannerParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Root-to-best-node waypoint list (starting with ``start``)."""
    tree = grow_rigtree(belief, interest_mask, start, remaining_budget, params, rng)
    return tree.path_to(tree.best())


def planned_samples(start, path: np.ndarray, interval: float) -> np.ndarray:
    """Hallucinated measurement locations along a planned path (``path[0]`` is the start)."""
    return path_samples(start, np.asarray(path)[1:], interval)[0] if len(path) > 1 else np.zeros((0, 2))


def sga_plan(
    belief: BeliefModel,
    agents: Sequence[int],
    starts: dict[int, np.ndarray],
    budgets: dict[int, float],
    interest_mask: InterestMask,
    params: PlannerParams,
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    """Plan agents in the given order, each conditioned on its predecessors' planned samples."""
    plans: dict[int, np.ndarray] = {}
    planned = np.zeros((0, 2))
    for i in agents:
        b = condition_variance_only(belief, planned)
        path = rigtree_plan(b, interest_mask, starts[i], budgets[i], params, rng)
        plans[i] = path
        planned = np.vstack([planned, planned_samples(starts[i], path, params.interval)])
    return plans


def random_walk_plan(
    start,
    remaining_budget: float,
    rng: np.random.Generator,
    steps: int = 8,
    step_length: float = 0.2,
) -> np.ndarray:
    """``steps`` waypoints of uniformly random heading, reflected at the domain boundary.

    The budget is enforced when the plan is executed; it is accepted here only
    to share the planner call signature.
    """
    pos = np.asarray(start, dtype=float)
    out = []
    for _ in range(steps):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        nxt = pos + step_length * np.array([np.cos(theta), np.sin(theta)])
        nxt = np.where(nxt < 0.0, -nxt, nxt)
        nxt = np.where(nxt > 1.0, 2.0 - nxt, nxt)
        out.append(nxt)
        pos = nxt
    return np.asarray(out)


def padded_plan(start, path: np.ndarray, horizon: int) -> np.ndarray:
    """First ``horizon`` waypoints after the start, padding by repeating the last one."""
    wps = np.asarray(path, dtype=float).reshape(-1, 2)[1:]
    if len(wps) == 0:
        wps = np.asarray(start, dtype=float).reshape(1, 2)
    wps = wps[:horizon]
    if len(wps) < horizon:
        wps = np.vstack([wps, np.repeat(wps[-1:], horizon - len(wps), axis=0)])
    return wps
