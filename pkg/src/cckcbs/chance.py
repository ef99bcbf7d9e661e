"""Probabilistic collision checking, goal chance constraints and risk allocation.

Three robot-robot checkers of decreasing conservatism are provided:

* ``m1_check``  -- disks bounding the p_safe contour plus the body must not touch;
* ``m21_check`` -- linear chance constraints against a polygon bounding the
  collision disk of the pairwise difference distribution;
* ``m22_check`` -- standard-normal mass of grid cells covering the whitened polygon.

``mc_collision_probability`` is the sampling ground truth that all three must dominate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .gaussian import (
    WorkspaceMarginal,
    chi2_quantile,
    inverse_erf,
    sqrt_factor,
)
from .geometry import Body, Polytope, half_diameter, minkowski_difference, polygons_intersect_batch


class Verdict(enum.Enum):
    VALID = "valid"
    POSSIBLY_COLLIDING = "possibly_colliding"

    def __bool__(self) -> bool:
        return self is Verdict.VALID

    @classmethod
    def of(cls, ok: bool) -> "Verdict":
        return cls.VALID if ok else cls.POSSIBLY_COLLIDING


class Method(str, enum.Enum):
    M1 = "m1"
    M21 = "m21"
    M22 = "m22"


class DegenerateDistanceError(ValueError):
    pass


@dataclass(frozen=True)
class CheckerConfig:
    method: Method = Method.M22
    polytope_sides: int = 8
    grid_divisions: int = 5
    p_safe: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.polytope_sides < 4:
            raise ValueError("polytope needs at least 4 sides")
        if self.grid_divisions < 1:
            raise ValueError("grid needs at least one division")
        if not (0.0 < self.p_safe < 1.0):
            raise ValueError("p_safe must lie in (0, 1)")

    @property
    def label(self) -> str:
        if self.method is Method.M22:
            return f"M.2.2({self.grid_divisions})"
        return {Method.M1: "M.1", Method.M21: "M.2.1"}[self.method]


# ---------------------------------------------------------------------------
# Bounds shared by the checkers
# ---------------------------------------------------------------------------


def body_radius(body) -> float:
    """Half the largest distance between two points of the body."""
    if isinstance(body, Body):
        return body.radius_bound
    return half_diameter(body)


def _lambda_max(cov: np.ndarray) -> float:
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    return 0.5 * (a + c) + math.sqrt(0.25 * (a - c) ** 2 + b * b)


def contour_radius(marginal: WorkspaceMarginal, p_safe: float) -> float:
    """Radius of the disk enclosing the p_safe Mahalanobis contour of the marginal."""
    lam = max(0.0, _lambda_max(marginal.cov))
    return math.sqrt(chi2_quantile(p_safe, 2) * lam)


def m1_check(bel_i: WorkspaceMarginal, body_i: Body, bel_j: WorkspaceMarginal, body_j: Body, p_safe: float) -> Verdict:
    bound_i = contour_radius(bel_i, p_safe) + body_i.radius_bound
    bound_j = contour_radius(bel_j, p_safe) + body_j.radius_bound
    dist = float(np.linalg.norm(bel_i.mean - bel_j.mean))
    return Verdict.of(dist > bound_i + bound_j)


def difference_belief(bel_i: WorkspaceMarginal, bel_j: WorkspaceMarginal) -> WorkspaceMarginal:
    return WorkspaceMarginal(bel_i.mean - bel_j.mean, bel_i.cov + bel_j.cov)


def collision_polytope(body_i: Body, body_j: Body, sides: int = 8) -> Polytope:
    """Regular polygon circumscribing the disk of radius R_i + R_j at the origin."""
    if sides < 4:
        raise ValueError("polytope needs at least 4 sides")
    return Polytope.regular(sides, body_i.radius_bound + body_j.radius_bound)


def _erf_margin(p_c: float) -> float:
    if not (0.0 < p_c < 0.5):
        raise ValueError(f"linear chance constraint needs p_c in (0, 0.5), got {p_c}")
    return math.sqrt(2.0) * inverse_erf(1.0 - 2.0 * p_c)


def m21_separating_halfplane(diff: WorkspaceMarginal, poly: Polytope, p_c: float) -> int | None:
    """Index of the first half-plane that certifies P(diff in poly) <= p_c, if any."""
    k = _erf_margin(p_c)
    spread = np.sqrt(np.einsum("hi,ij,hj->h", poly.normals, diff.cov, poly.normals))
    lhs = poly.normals @ diff.mean
    ok = np.nonzero(lhs >= poly.offsets + spread * k)[0]
    return int(ok[0]) if len(ok) else None


def m21_check(diff: WorkspaceMarginal, poly: Polytope, p_c: float) -> Verdict:
    return Verdict.of(m21_separating_halfplane(diff, poly, p_c) is not None)


def interval_mass(lo, hi):
    """Standard normal mass of [lo, hi], evaluated on the tail side to avoid cancellation."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    upper = special.ndtr(-lo) - special.ndtr(-hi)
    lower = special.ndtr(hi) - special.ndtr(lo)
    return np.where(lo > 0.0, upper, lower)


_SQRT2 = math.sqrt(2.0)


def _segment_mass(lo: float, hi: float) -> float:
    if lo > 0.0:
        return 0.5 * (math.erfc(lo / _SQRT2) - math.erfc(hi / _SQRT2))
    return 0.5 * (math.erfc(-hi / _SQRT2) - math.erfc(-lo / _SQRT2))


def _chains(xs: Sequence[float], ys: Sequence[float]):
    """Lower and upper boundary chains of a CCW convex polygon, each ordered by increasing x."""
    n = len(xs)
    left = min(range(n), key=lambda k: (xs[k], ys[k]))
    right = max(range(n), key=lambda k: (xs[k], ys[k]))
    lower, upper = [], []
    k = left
    while True:
        lower.append((xs[k], ys[k]))
        if k == right:
            break
        k = (k + 1) % n
    while True:
        upper.append((xs[k], ys[k]))
        if k == left:
            break
        k = (k + 1) % n
    upper.reverse()
    return lower, upper


def _chain_values(chain, lines: Sequence[float], pick) -> list[float]:
    """Chain height at each sorted x in ``lines``; ``pick`` resolves vertical segments."""
    out = []
    k = 0
    last = len(chain) - 2
    for x in lines:
        while k < last and chain[k + 1][0] < x:
            k += 1
        (ax, ay), (bx, by) = chain[k], chain[k + 1]
        if bx <= ax:
            out.append(pick(ay, by))
            continue
        t = (x - ax) / (bx - ax)
        t = 0.0 if t < 0.0 else 1.0 if t > 1.0 else t
        out.append(ay + t * (by - ay))
    return out


def grid_cover_mass(xs: Sequence[float], ys: Sequence[float], d: int) -> float:
    """Standard-normal mass of the d x d bounding-box cells that touch a convex polygon.

    ``xs``/``ys`` hold the CCW vertices. Each column strip meets the polygon in
    a convex piece whose y-range picks out a contiguous run of covered cells.
    """
    xmin, xmax, ymin, ymax = min(xs), max(xs), min(ys), max(ys)
    if d == 1:
        return _segment_mass(xmin, xmax) * _segment_mass(ymin, ymax)
    hx = (xmax - xmin) / d
    hy = (ymax - ymin) / d
    gx = [xmin + hx * i for i in range(d)] + [xmax]
    gy = [ymin + hy * j for j in range(d)] + [ymax]
    rows = [_segment_mass(gy[j], gy[j + 1]) for j in range(d)]
    lower, upper = _chains(xs, ys)
    bottom = _chain_values(lower, gx, min)
    top = _chain_values(upper, gx, max)
    # strip extents start from the chain heights on both grid lines, then take in inner vertices
    lo = [min(bottom[i], bottom[i + 1]) for i in range(d)]
    hi = [max(top[i], top[i + 1]) for i in range(d)]
    for vx, vy in zip(xs, ys):
        i = min(d - 1, max(0, int((vx - xmin) / hx)))
        if vy < lo[i]:
            lo[i] = vy
        if vy > hi[i]:
            hi[i] = vy
    slack = 1e-12 * hy
    total = 0.0
    for i in range(d):
        j0 = min(d - 1, max(0, int((lo[i] - slack - ymin) / hy)))
        j1 = min(d, max(j0 + 1, math.ceil((hi[i] + slack - ymin) / hy)))
        total += _segment_mass(gx[i], gx[i + 1]) * sum(rows[j0:j1])
    return total


def nearest_direction(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float] | None:
    """Unit vector toward the point of a CCW convex polygon closest to the origin.

    None when the origin lies inside (or on) the polygon.
    """
    n = len(xs)
    inside = True
    best = math.inf
    bx = by = 0.0
    for k in range(n):
        ax, ay = xs[k], ys[k]
        ex, ey = xs[(k + 1) % n] - ax, ys[(k + 1) % n] - ay
        if ex * (-ay) - ey * (-ax) < 0.0:
            inside = False
        t = -(ax * ex + ay * ey) / (ex * ex + ey * ey)
        t = 0.0 if t < 0.0 else 1.0 if t > 1.0 else t
        px, py = ax + t * ex, ay + t * ey
        dist = px * px + py * py
        if dist < best:
            best, bx, by = dist, px, py
    if inside or best == 0.0:
        return None
    r = math.sqrt(best)
    return bx / r, by / r


def align_grid(xs: Sequence[float], ys: Sequence[float]) -> tuple[list[float], list[float]]:
    """Rotate a whitened polygon so its nearest point to the origin lies on the +x axis.

    The standard normal is rotation invariant, so the mass is unchanged, while
    the bounding box's near side becomes the tightest single half-plane.
    """
    u = nearest_direction(xs, ys)
    if u is None:
        return list(xs), list(ys)
    ca, sa = u
    return [ca * x + sa * y for x, y in zip(xs, ys)], [-sa * x + ca * y for x, y in zip(xs, ys)]


def m22_probability(diff: WorkspaceMarginal, poly: Polytope, d: int) -> float:
    if d < 1:
        raise ValueError("grid needs at least one division")
    _, m_inv = sqrt_factor(diff.cov)
    # only the vertices are needed; m_inv is symmetric so the CCW order survives
    verts = (poly.vertices() - diff.mean) @ m_inv
    return grid_cover_mass(*align_grid(verts[:, 0].tolist(), verts[:, 1].tolist()), d)


def m22_check(diff: WorkspaceMarginal, poly: Polytope, p_c: float, d: int) -> tuple[float, Verdict]:
    p_poly = m22_probability(diff, poly, d)
    return p_poly, Verdict.of(p_poly <= p_c)


# ---------------------------------------------------------------------------
# Monte Carlo ground truth
# ---------------------------------------------------------------------------


def mc_collision_probability(
    bel_i: WorkspaceMarginal,
    body_i: Body,
    bel_j: WorkspaceMarginal,
    body_j: Body,
    n: int = 100_000,
    seed: int = 0,
    heading_i: tuple[float, float] | None = None,
    heading_j: tuple[float, float] | None = None,
) -> tuple[float, float]:
    """Fraction of sampled pose pairs whose bodies overlap, with its binomial standard error.

    ``heading_*`` are optional (mean, variance) orientation marginals; without
    them the body keeps its local-frame orientation.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    pi = rng.multivariate_normal(bel_i.mean, bel_i.cov, size=n, method="eigh")
    pj = rng.multivariate_normal(bel_j.mean, bel_j.cov, size=n, method="eigh")
    if heading_i is None and heading_j is None:
        region = minkowski_difference(body_i, body_j)
        hits = region.contains_many(pi - pj)
    else:
        ti = _sample_heading(rng, heading_i, n)
        tj = _sample_heading(rng, heading_j, n)
        hits = polygons_intersect_batch(_place(body_i, pi, ti), _place(body_j, pj, tj))
    p = float(np.mean(hits))
    return p, math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _sample_heading(rng, heading, n):
    if heading is None:
        return np.zeros(n)
    mean, var = heading
    return mean + math.sqrt(max(var, 0.0)) * rng.standard_normal(n)


def _place(body: Body, positions: np.ndarray, headings: np.ndarray) -> np.ndarray:
    c, s = np.cos(headings), np.sin(headings)
    v = body.vertices
    x = c[:, None] * v[None, :, 0] - s[:, None] * v[None, :, 1]
    y = s[:, None] * v[None, :, 0] + c[:, None] * v[None, :, 1]
    return np.stack([x, y], axis=-1) + positions[:, None, :]


# ---------------------------------------------------------------------------
# Static obstacles and goal
# ---------------------------------------------------------------------------


class ObstacleMode(str, enum.Enum):
    LINEAR = "linear"
    CONTOUR = "contour"


def static_obstacle_check(
    bel: WorkspaceMarginal,
    body: Body,
    obstacle: Polytope,
    p_c_obs: float,
    method: ObstacleMode | str = ObstacleMode.LINEAR,
    p_safe: float | None = None,
) -> Verdict:
    """Chance constraint against one static obstacle.

    ``linear`` inflates the obstacle by the body radius and applies the
    half-plane test with risk ``p_c_obs``; ``contour`` requires the disk of
    radius contour + body radius (at ``p_safe``) to miss the obstacle.
    """
    method = ObstacleMode(method)
    if method is ObstacleMode.LINEAR:
        return m21_check(bel, obstacle.inflate(body.radius_bound), p_c_obs)
    if p_safe is None:
        raise ValueError("contour mode needs p_safe")
    reach = contour_radius(bel, p_safe) + body.radius_bound
    return Verdict.of(obstacle.distance_to_point(bel.mean) > reach)


@dataclass(frozen=True)
class GoalRegion:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(2)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("goal radius must be positive")


def goal_check(bel, goal: GoalRegion, p_safe: float, position_indices: Sequence[int] = (0, 1)) -> Verdict:
    """Sufficient test for P(goal) >= p_safe: the contour disk lies inside the goal disk."""
    idx = list(position_indices)
    marginal = bel if isinstance(bel, WorkspaceMarginal) else WorkspaceMarginal(bel.mean[idx], bel.cov[np.ix_(idx, idx)])
    offset = float(np.linalg.norm(marginal.mean - goal.center))
    return Verdict.of(offset + contour_radius(marginal, p_safe) <= goal.radius)


# ---------------------------------------------------------------------------
# Risk allocation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskAllocation:
    p_coll: float
    p_c_obstacles: float
    pairwise: Mapping[tuple[int, int], float] = field(default_factory=dict)
    per_obstacle: float = 0.0
    default_pair: float = 0.0

    def share(self, key) -> float:
        """Share for a pair key ``(i, j)`` (either order) or another robot's id."""
        if key in self.pairwise:
            return self.pairwise[key]
        if isinstance(key, tuple) and key[::-1] in self.pairwise:
            return self.pairwise[key[::-1]]
        return self.default_pair


def allocate_equal(p_coll: float, n_obstacles: int, n_agents: int) -> RiskAllocation:
    if not (0.0 < p_coll < 1.0):
        raise ValueError("p_coll must lie in (0, 1)")
    if n_agents < 1:
        raise ValueError("need at least one agent")
    sources = n_obstacles + n_agents - 1
    if sources == 0:
        return RiskAllocation(p_coll, 0.0, {}, 0.0, p_coll)
    share = p_coll / sources
    pairs = {(i, j): share for i in range(n_agents) for j in range(i + 1, n_agents)}
    return RiskAllocation(p_coll, share * n_obstacles, pairs, share, share)


def split_agent_obstacle(p_coll: float, volume_agents: float, volume_obstacles: float) -> tuple[float, float]:
    if volume_agents <= 0:
        raise ValueError("agent volume must be positive")
    total = volume_agents + volume_obstacles
    return volume_agents * p_coll / total, volume_obstacles * p_coll / total


def allocate_adaptive(
    p_coll: float,
    volume_agents: float,
    volume_obstacles: float,
    distances: Mapping[int, float] | Sequence[float],
    n_obstacles: int = 0,
) -> RiskAllocation:
    """Distance-weighted shares of the agent budget for one robot.

    ``distances`` maps each other robot to its distance from the robot being
    allocated; closer robots receive larger shares that sum to P_c^A.
    """
    p_agents, p_obstacles = split_agent_obstacle(p_coll, volume_agents, volume_obstacles)
    items = dict(distances) if isinstance(distances, Mapping) else dict(enumerate(distances))
    if any(d <= 0 for d in items.values()):
        raise DegenerateDistanceError("robots are coincident")
    inv_total = sum(1.0 / d for d in items.values())
    pairs = {k: (1.0 / d) / inv_total * p_agents for k, d in items.items()} if items else {}
    per_obs = p_obstacles / n_obstacles if n_obstacles else 0.0
    return RiskAllocation(p_coll, p_obstacles, pairs, per_obs, p_agents)
