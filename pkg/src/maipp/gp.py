"""Gaussian-process belief over the information field.

Exact GP regression with a Matérn 3/2 kernel and a constant prior mean. The
posterior covariance does not depend on the measured values, which is what
lets planners score candidate paths by conditioning on hallucinated
measurement locations alone (:func:`condition_variance_only`,
:class:`GainEvaluator`).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist

SQRT3 = np.sqrt(3.0)
JITTER = 1e-10
NEGATIVE_VARIANCE_TOL = 1e-10


class GPConditioningError(np.linalg.LinAlgError):
    """The kernel system could not be factorised (or produced large negative variances)."""

    def __init__(self, message: str, condition: float) -> None:
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float = 0.125
    signal_variance: float = 1.0
    noise_variance: float = 1e-4

    def __post_init__(self) -> None:
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")


def matern32(distance, params: KernelParams = KernelParams()):
    """σ_f² (1 + √3 d/ℓ) exp(−√3 d/ℓ), elementwise over ``distance``."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("matern32: distance must be non-negative")
    r = SQRT3 * d / params.lengthscale
    out = params.signal_variance * (1.0 + r) * np.exp(-r)
    return float(out) if out.ndim == 0 else out


def kernel(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    return matern32(cdist(a, b), params) if len(a) and len(b) else np.zeros((len(a), len(b)))


def uniform_grid(resolution: int = 30) -> np.ndarray:
    """Cell centres of a ``resolution``² grid over the unit square, row-major in y then x."""
    c = (np.arange(resolution) + 0.5) / resolution
    xx, yy = np.meshgrid(c, c)
    return np.column_stack([xx.ravel(), yy.ravel()])


def _factor(points: np.ndarray, params: KernelParams):
    if len(points) == 0:
        return None
    k = kernel(points, points, params)
    k[np.diag_indices_from(k)] += params.noise_variance + JITTER
    try:
        return cho_factor(k, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise GPConditioningError("kernel matrix is not positive definite", float(np.linalg.cond(k))) from None


class BeliefModel:
    """Measurements, kernel hyperparameters and cached Cholesky factors.

    ``phantom`` locations take part in the covariance only: they model planned
    (not yet taken) measurements, so the mean stays that of the real data.
    Instances are treated as immutable; updates return new objects.
    """

    def __init__(
        self,
        X=None,
        Y=None,
        params: KernelParams = KernelParams(),
        prior_mean: float = 0.0,
        phantom=None,
    ) -> None:
        self.X = np.zeros((0, 2)) if X is None else np.asarray(X, dtype=float).reshape(-1, 2)
        self.Y = np.zeros(0) if Y is None else np.asarray(Y, dtype=float).reshape(-1)
        if len(self.X) != len(self.Y):
            raise ValueError(f"{len(self.X)} locations but {len(self.Y)} values")
        self.phantom = np.zeros((0, 2)) if phantom is None else np.asarray(phantom, dtype=float).reshape(-1, 2)
        self.params = params
        self.prior_mean = float(prior_mean)
        for arr in (self.X, self.Y, self.phantom):
            arr.setflags(write=False)
        self._refresh()

    def _refresh(self) -> None:
        self._mean_factor = _factor(self.X, self.params)
        if len(self.phantom):
            self._var_factor = _factor(self.variance_points, self.params)
        else:
            self._var_factor = self._mean_factor
        self._alpha = (
            cho_solve(self._mean_factor, self.Y - self.prior_mean, check_finite=False)
            if self._mean_factor is not None
            else np.zeros(0)
        )

    @property
    def variance_points(self) -> np.ndarray:
        return np.vstack([self.X, self.phantom]) if len(self.phantom) else self.X

    def __len__(self) -> int:
        return len(self.X)

    def refreshed(self) -> "BeliefModel":
        """Same data with freshly recomputed factorisations."""
        return BeliefModel(self.X, self.Y, self.params, self.prior_mean, self.phantom)

    def with_measurements(self, X, Y) -> "BeliefModel":
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        Y = np.asarray(Y, dtype=float).reshape(-1)
        return BeliefModel(np.vstack([self.X, X]), np.concatenate([self.Y, Y]), self.params, self.prior_mean, self.phantom)

    def whitened_cross(self, points: np.ndarray) -> np.ndarray:
        """L⁻¹ K(X_var, points) for the covariance factor (shape |X_var| × |points|)."""
        if self._var_factor is None:
            return np.zeros((0, len(points)))
        kxp = kernel(self.variance_points, points, self.params)
        return solve_triangular(self._var_factor[0], kxp, lower=True, check_finite=False)


@dataclass
class PosteriorField:
    points: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def to_csv(self, path: str | Path, grid_shape: tuple[int, int] | None = None) -> None:
        """Row-major CSV with a grid-shape comment header."""
        shape = grid_shape or (len(self.points), 1)
        rows = np.column_stack([self.points, self.mean, self.var])
        header = f"grid_shape={shape[0]}x{shape[1]}\nx,y,mean,variance"
        np.savetxt(path, rows, delimiter=",", header=header, comments="# ")


def _clamp_variance(var: np.ndarray, belief: BeliefModel) -> np.ndarray:
    if np.any(var < -NEGATIVE_VARIANCE_TOL):
        k = kernel(belief.variance_points, belief.variance_points, belief.params)
        raise GPConditioningError(f"negative posterior variance {var.min():.3e}", float(np.linalg.cond(k)))
    return np.maximum(var, 0.0)


def posterior(belief: BeliefModel, Xstar, full_cov: bool = False) -> PosteriorField:
    """Posterior mean and (diagonal or full) covariance at the query points."""
    Xs = np.asarray(Xstar, dtype=float).reshape(-1, 2)
    if len(Xs) == 0:
        raise ValueError("posterior: query set is empty")
    p = belief.params
    if belief._mean_factor is None:
        mean = np.full(len(Xs), belief.prior_mean)
    else:
        mean = belief.prior_mean + kernel(Xs, belief.X, p) @ belief._alpha
    v = belief.whitened_cross(Xs)
    var = _clamp_variance(p.signal_variance - np.einsum("ij,ij->j", v, v), belief)
    cov = None
    if full_cov:
        cov = kernel(Xs, Xs, p) - v.T @ v
        cov = 0.5 * (cov + cov.T)
        cov[np.diag_indices_from(cov)] = var
    return PosteriorField(Xs, mean, var, cov)


@dataclass(frozen=True)
class InterestMask:
    flags: np.ndarray
    mu_th: float
    beta_ucb: float
    points: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def interest_points(self) -> np.ndarray:
        if self.points is None:
            raise ValueError("mask was built without query points")
        return self.points[self.flags]


def interest_set(post: PosteriorField, mu_th: float = 0.4, beta_ucb: float = 1.0) -> InterestMask:
    """Points whose upper confidence bound μ + β·P reaches the threshold."""
    return InterestMask(post.mean + beta_ucb * post.var >= mu_th, mu_th, beta_ucb, post.points)


def cov_trace(post: PosteriorField, mask: InterestMask) -> float:
    if len(mask.flags) != len(post.var):
        raise ValueError("mask and posterior are defined on different grids")
    return float(post.var[mask.flags].sum())


def info_gain(prior_trace: float, post_trace: float) -> float:
    return prior_trace - post_trace


def condition_variance_only(belief: BeliefModel, planned_locations) -> BeliefModel:
    """Belief whose covariance also accounts for measurements at ``planned_locations``."""
    Z = np.asarray(planned_locations, dtype=float).reshape(-1, 2)
    if len(Z) == 0:
        return belief
    return BeliefModel(belief.X, belief.Y, belief.params, belief.prior_mean, np.vstack([belief.phantom, Z]))


class GainEvaluator:
    """Trace reduction over a fixed point set from hypothetical measurements.

    For candidate locations Z the reduction is ‖S⁻½ P(Z, I)‖_F² with
    S = P(Z, Z) + σ_n² I, where P is the current posterior covariance. This
    equals ``Tr(P_I) − Tr(P_I | Z)`` without refactorising the full system.
    Per-location rows can be cached by callers that reuse locations (RIG trees).
    """

    def __init__(self, belief: BeliefModel, points) -> None:
        self.belief = belief
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        self._vi = belief.whitened_cross(self.points)

    def rows(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """(L⁻¹K(X, Z), P(Z, I)) for locations Z."""
        Z = np.asarray(Z, dtype=float).reshape(-1, 2)
        vz = self.belief.whitened_cross(Z)
        pzi = kernel(Z, self.points, self.belief.params) - vz.T @ self._vi
        return vz, pzi

    def gain_from_rows(self, Z, vz: np.ndarray, pzi: np.ndarray) -> float:
        Z = np.asarray(Z, dtype=float).reshape(-1, 2)
        if len(Z) == 0 or pzi.shape[1] == 0:
            return 0.0
        p = self.belief.params
        s = kernel(Z, Z, p) - vz.T @ vz
        s[np.diag_indices_from(s)] += p.noise_variance + JITTER
        try:
            c = cho_factor(s, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            # duplicated locations with zero noise: fall back to a pseudo-inverse
            return float(np.einsum("ij,ij->", pzi, np.linalg.pinv(s) @ pzi))
        w = solve_triangular(c[0], pzi, lower=True, check_finite=False)
        return float(np.einsum("ij,ij->", w, w))

    def gain(self, Z) -> float:
        vz, pzi = self.rows(Z)
        return self.gain_from_rows(Z, vz, pzi)
