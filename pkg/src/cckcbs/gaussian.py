"""Gaussian numerics shared by the planners and the collision checkers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .geometry import Polytope

SYM_TOL = 1e-9
PSD_TOL = 1e-9
DEGENERATE_EIG = 1e-12


class DimensionError(ValueError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


def check_covariance(cov: np.ndarray, dim: int | None = None) -> None:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"covariance must be square, got shape {cov.shape}")
    if dim is not None and cov.shape[0] != dim:
        raise DimensionError(f"covariance is {cov.shape[0]}x{cov.shape[0]}, expected {dim}x{dim}")
    scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("covariance is not symmetric")
    if cov.size and np.min(np.linalg.eigvalsh(0.5 * (cov + cov.T))) < -PSD_TOL:
        raise ValueError("covariance is not positive semidefinite")


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        check_covariance(cov, len(mean))
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def __eq__(self, other):
        if not isinstance(other, GaussianBelief):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.cov, other.cov)


@dataclass(frozen=True, eq=False)
class WorkspaceMarginal(GaussianBelief):
    """Position-only marginal of a belief (2D workspace)."""

    def __post_init__(self):
        super().__post_init__()
        if self.dim != 2:
            raise DimensionError(f"workspace marginal must be 2D, got {self.dim}D")


def marginal_workspace(belief: GaussianBelief, position_indices: Sequence[int]) -> WorkspaceMarginal:
    idx = list(position_indices)
    if len(idx) != 2:
        raise DimensionError("workspace index set must have length 2")
    if any(i < 0 or i >= belief.dim for i in idx):
        raise DimensionError(f"index set {idx} out of range for a {belief.dim}D belief")
    return WorkspaceMarginal(belief.mean[idx], belief.cov[np.ix_(idx, idx)])


def chi2_quantile(p: float, dof: int) -> float:
    """Inverse chi-square CDF, by bisection on the regularized lower incomplete gamma."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if dof < 1:
        raise ValueError("degrees of freedom must be positive")
    if dof == 2:
        # the 2-dof distribution is exponential with mean 2
        return -2.0 * math.log1p(-p)
    half = dof / 2.0
    lo, hi = 0.0, max(1.0, 2.0 * dof)
    while special.gammainc(half, hi / 2.0) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if special.gammainc(half, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


_SQRT2 = math.sqrt(2.0)


def std_normal_cdf(z):
    """Standard normal CDF; accepts scalars or arrays."""
    if np.isscalar(z):
        return 0.5 * math.erfc(-float(z) / _SQRT2)
    return special.ndtr(np.asarray(z, dtype=float))


def inverse_erf(y: float) -> float:
    if not (-1.0 < y < 1.0):
        raise ValueError(f"inverse_erf is defined on (-1, 1), got {y}")
    return float(special.erfinv(y))


def sqrt_factor(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root M (M M^T = cov) and its inverse via eigendecomposition."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals[0] <= DEGENERATE_EIG:
        raise DegenerateCovarianceError(f"covariance has eigenvalue {vals[0]:.3g} <= {DEGENERATE_EIG}")
    root = np.sqrt(vals)
    m = (vecs * root) @ vecs.T
    m_inv = (vecs / root) @ vecs.T
    return m, m_inv


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray
    m: np.ndarray
    m_inv: np.ndarray

    def forward(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.mean) @ self.m_inv.T

    def inverse(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.m.T + self.mean


def whiten(dist: WorkspaceMarginal, poly: Polytope) -> tuple[Polytope, WhiteningTransform]:
    """Map ``poly`` through x -> M^-1 (x - mean) so that ``dist`` becomes standard normal."""
    m, m_inv = sqrt_factor(dist.cov)
    # c^T x <= d with x = M z + mu  ->  (M^T c)^T z <= d - c^T mu
    n = poly.normals @ m
    scale = np.linalg.norm(n, axis=1)
    normals = n / scale[:, None]
    offsets = (poly.offsets - poly.normals @ dist.mean) / scale
    transform = WhiteningTransform(dist.mean.copy(), m, m_inv)
    # m_inv is symmetric positive definite, so the vertex order stays counter-clockwise
    return Polytope._with_vertices(normals, offsets, transform.forward(poly.vertices())), transform


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def wasserstein2(a: GaussianBelief, b: GaussianBelief) -> float:
    """2-Wasserstein distance between two Gaussians."""
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    mean_sq = float(np.sum((a.mean - b.mean) ** 2))
    ra = psd_sqrt(a.cov)
    cross = psd_sqrt(ra @ b.cov @ ra)
    bures = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return math.sqrt(max(0.0, mean_sq + max(0.0, bures)))


def euclidean_mean_distance(a: GaussianBelief, b: GaussianBelief) -> float:
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.linalg.norm(a.mean - b.mean))


BELIEF_METRICS = {"wasserstein": wasserstein2, "euclidean": euclidean_mean_distance}


def belief_distance(a: GaussianBelief, b: GaussianBelief, metric: str = "wasserstein") -> float:
    try:
        fn = BELIEF_METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown belief metric {metric!r}") from None
    return fn(a, b)
