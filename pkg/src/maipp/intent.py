"""Agent intent: Gaussians fitted to planned waypoints, fused across teammates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gp import uniform_grid

COV_FLOOR = 1e-4


@dataclass(frozen=True)
class IntentDistribution:
    mean: np.ndarray
    cov: np.ndarray

    def density(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        d = pts - self.mean
        inv = np.linalg.inv(self.cov)
        q = np.einsum("ni,ij,nj->n", d, inv, d)
        return np.exp(-0.5 * q) / (2.0 * np.pi * np.sqrt(np.linalg.det(self.cov)))

    def key(self) -> tuple:
        return tuple(self.mean.tolist()) + tuple(self.cov.ravel().tolist())


def fit_intent(waypoints, eps: float = COV_FLOOR) -> IntentDistribution:
    """Sample mean and population covariance of the waypoints, floored by ``eps``·I."""
    w = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(w) == 0:
        raise ValueError("fit_intent: no waypoints")
    mu = w.mean(axis=0)
    d = w - mu
    cov = d.T @ d / len(w) + eps * np.eye(2)
    cov = 0.5 * (cov + cov.T)
    return IntentDistribution(mu, cov)


def intent_from_candidates(candidates: Sequence, eps: float = COV_FLOOR) -> IntentDistribution:
    if len(candidates) == 0:
        raise ValueError("intent_from_candidates: no candidates")
    return fit_intent(np.vstack([np.asarray(c, dtype=float).reshape(-1, 2) for c in candidates]), eps)


@dataclass(frozen=True)
class AccumulatedIntent:
    components: tuple[IntentDistribution, ...]
    grid: np.ndarray
    norm: float
    cell_area: float

    def __call__(self, positions) -> np.ndarray:
        pts = np.asarray(positions, dtype=float).reshape(-1, 2)
        if not self.components:
            return np.zeros(len(pts))
        total = np.zeros(len(pts))
        for c in self.components:
            total += c.density(pts)
        return total / self.norm

    @property
    def grid_values(self) -> np.ndarray:
        return self(self.grid)


def fuse_intents(others: Sequence[IntentDistribution], grid: np.ndarray | None = None) -> AccumulatedIntent:
    """Sum of teammates' intent densities, normalised to unit mass on the grid.

    Components are summed in a canonical order so the result does not depend on
    the order they are passed in.
    """
    grid = uniform_grid(30) if grid is None else np.asarray(grid, dtype=float).reshape(-1, 2)
    cell_area = 1.0 / len(grid)
    comps = tuple(sorted((c for c in others if c is not None), key=IntentDistribution.key))
    if not comps:
        return AccumulatedIntent((), grid, 1.0, cell_area)
    raw = AccumulatedIntent(comps, grid, 1.0, cell_area)
    norm = float(raw(grid).sum() * cell_area)
    return AccumulatedIntent(comps, grid, norm, cell_area)


def eval_intent(acc: AccumulatedIntent, positions) -> np.ndarray:
    return acc(positions)
