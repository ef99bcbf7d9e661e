"""Single-agent Gaussian belief-space kinodynamic planner (sparse tree, SST-style).

An *agent* is one robot or a block-composed group of robots planned jointly.
Nodes store the nominal state only; the expected-belief covariance depends on
the timestep alone (time-invariant systems), so it is looked up in a shared
:class:`~cckcbs.dynamics.CovarianceSchedule`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .chance import (
    CheckerConfig,
    GoalRegion,
    Method,
    ObstacleMode,
    RiskAllocation,
    Verdict,
    grid_cover_mass,
    nearest_direction,
)
from .dynamics import CovarianceSchedule, LinearSystem, MotionPlan, compose_systems
from .gaussian import GaussianBelief, WorkspaceMarginal, chi2_quantile
from .geometry import Body, Polytope


class PlanningFailure(Exception):
    reason = "failure"


class BudgetExhausted(PlanningFailure):
    reason = "budget_exhausted"


class StartInvalid(PlanningFailure):
    reason = "start_invalid"


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Everything the planner needs to know about one robot."""

    name: str
    system: LinearSystem
    body: Body
    start: GaussianBelief
    goal: GoalRegion
    control_low: np.ndarray
    control_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray

    def __post_init__(self):
        for attr in ("control_low", "control_high", "state_low", "state_high"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)


@dataclass(frozen=True, eq=False)
class Agent:
    """One or more robots composed into a single block-diagonal system."""

    robot_ids: tuple[int, ...]
    robots: tuple[RobotModel, ...]
    system: LinearSystem
    start: GaussianBelief
    control_low: np.ndarray
    control_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    position_slices: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, robot_ids: Sequence[int], robots: Sequence[RobotModel]) -> "Agent":
        robots = tuple(robots)
        if len(robots) == 1:
            system = robots[0].system
        else:
            system = compose_systems([r.system for r in robots])
        offsets = np.cumsum([0] + [r.system.n for r in robots[:-1]])
        pos = tuple(
            (int(o + r.system.position_indices[0]), int(o + r.system.position_indices[1]))
            for r, o in zip(robots, offsets)
        )
        start = GaussianBelief(
            np.concatenate([r.start.mean for r in robots]),
            _block_diag([r.start.cov for r in robots]),
        )
        cat = np.concatenate
        return cls(
            tuple(robot_ids),
            robots,
            system,
            start,
            cat([r.control_low for r in robots]),
            cat([r.control_high for r in robots]),
            cat([r.state_low for r in robots]),
            cat([r.state_high for r in robots]),
            pos,
        )

    @property
    def size(self) -> int:
        return len(self.robots)


def _block_diag(mats):
    from scipy.linalg import block_diag

    return block_diag(*mats)


@dataclass(frozen=True, eq=False)
class BeliefConstraint:
    """Time-indexed belief obstacle: another robot's marginals over [t_s, t_e]."""

    constraining_robot: int
    interval: tuple[int, int]
    beliefs: tuple[WorkspaceMarginal, ...]
    body: Body
    p_c: float
    target_robot: int | None = None

    def __post_init__(self):
        t_s, t_e = self.interval
        if t_e < t_s:
            raise ValueError("constraint interval is empty")
        if len(self.beliefs) != t_e - t_s + 1:
            raise ValueError("need one belief per step of the interval")

    def active(self, k: int) -> bool:
        return self.interval[0] <= k <= self.interval[1]

    def at(self, k: int) -> WorkspaceMarginal:
        return self.beliefs[k - self.interval[0]]


@dataclass(frozen=True)
class PlannerBudget:
    max_iterations: int | None = 20_000
    max_time: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iterations is None and self.max_time is None:
            raise ValueError("at least one budget must be finite")


@dataclass(frozen=True)
class PlannerConfig:
    goal_bias: float = 0.05
    min_steps: int = 1
    max_steps: int = 10
    delta_select: float = 0.2
    delta_prune: float = 0.1
    pruning: bool = True
    witness_time_weight: float = 0.05
    max_horizon: int = 300
    metric: str = "wasserstein"
    obstacle_mode: ObstacleMode = ObstacleMode.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "obstacle_mode", ObstacleMode(self.obstacle_mode))
        if not (1 <= self.min_steps <= self.max_steps):
            raise ValueError("need 1 <= min_steps <= max_steps")
        if self.metric not in ("wasserstein", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


# ---------------------------------------------------------------------------
# Fast pairwise checker on raw 2x2 numbers
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def _interval_mass(lo: float, hi: float) -> float:
    if lo > 0.0:
        return 0.5 * (math.erfc(lo / _SQRT2) - math.erfc(hi / _SQRT2))
    return 0.5 * (math.erfc(-hi / _SQRT2) - math.erfc(-lo / _SQRT2))


class PairChecker:
    """Robot-robot chance checks on plain floats, mirroring the public checkers.

    Covariances are passed as (a, b, c) for [[a, b], [b, c]].
    """

    def __init__(self, config: CheckerConfig):
        self.config = config
        self.method = config.method
        self.t_chi = chi2_quantile(config.p_safe, 2)
        n = config.polytope_sides
        ang = 2.0 * math.pi * np.arange(n) / n
        self.normals = np.column_stack([np.cos(ang), np.sin(ang)])
        self._unit_vertices = np.column_stack(
            [np.cos(ang + math.pi / n), np.sin(ang + math.pi / n)]
        ) / math.cos(math.pi / n)
        self._norm_list = [(float(c), float(s)) for c, s in self.normals]
        self._unit_vertex_list = [(float(x), float(y)) for x, y in self._unit_vertices]
        self._erf_cache: dict[float, float] = {}

    def contour(self, cov) -> float:
        a, b, c = cov
        lam = 0.5 * (a + c) + math.sqrt(0.25 * (a - c) ** 2 + b * b)
        return math.sqrt(self.t_chi * max(lam, 0.0))

    def _erf_margin(self, p_c: float) -> float:
        k = self._erf_cache.get(p_c)
        if k is None:
            if not (0.0 < p_c < 0.5):
                raise ValueError(f"linear chance constraint needs p_c in (0, 0.5), got {p_c}")
            k = _SQRT2 * float(special.erfinv(1.0 - 2.0 * p_c))
            self._erf_cache[p_c] = k
        return k

    def valid(self, mi, ci, ri: float, mj, cj, rj: float, p_c: float) -> bool:
        dx = mi[0] - mj[0]
        dy = mi[1] - mj[1]
        if self.method is Method.M1:
            bound = self.contour(ci) + ri + self.contour(cj) + rj
            return dx * dx + dy * dy > bound * bound
        a = ci[0] + cj[0]
        b = ci[1] + cj[1]
        c = ci[2] + cj[2]
        radius = ri + rj
        if self.method is Method.M21:
            k = self._erf_margin(p_c)
            for nx, ny in self._norm_list:
                spread = math.sqrt(max(nx * nx * a + 2.0 * nx * ny * b + ny * ny * c, 0.0))
                if nx * dx + ny * dy >= radius + spread * k:
                    return True
            return False
        return self.m22_probability(dx, dy, a, b, c, radius, accept_below=p_c) <= p_c

    def m22_probability(self, dx, dy, a, b, c, radius, d: int | None = None, accept_below: float = -1.0) -> float:
        """Grid-cover mass of the whitened collision polygon.

        When the single-cell (bounding box) mass is already <= ``accept_below``
        it is returned as is: finer grids can only cover less.
        """
        d = self.config.grid_divisions if d is None else d
        # symmetric inverse square root of [[a, b], [b, c]]
        tr = a + c
        disc = math.sqrt(0.25 * (a - c) ** 2 + b * b)
        l1 = 0.5 * tr + disc
        l2 = 0.5 * tr - disc
        if l2 <= 1e-12:
            from .gaussian import DegenerateCovarianceError

            raise DegenerateCovarianceError("difference covariance is singular")
        if b == 0.0:
            v1 = (1.0, 0.0) if a >= c else (0.0, 1.0)
        else:
            v1x, v1y = l1 - c, b
            nrm = math.hypot(v1x, v1y)
            v1 = (v1x / nrm, v1y / nrm)
        v2 = (-v1[1], v1[0])
        s1, s2 = 1.0 / math.sqrt(l1), 1.0 / math.sqrt(l2)
        w00 = s1 * v1[0] * v1[0] + s2 * v2[0] * v2[0]
        w01 = s1 * v1[0] * v1[1] + s2 * v2[0] * v2[1]
        w11 = s1 * v1[1] * v1[1] + s2 * v2[1] * v2[1]
        # whitened polygon vertices: W (v - mean), mean = (dx, dy)
        wx = []
        wy = []
        for ux, uy in self._unit_vertex_list:
            vx = ux * radius - dx
            vy = uy * radius - dy
            wx.append(w00 * vx + w01 * vy)
            wy.append(w01 * vx + w11 * vy)
        # grid axis along the direction of the polygon's nearest point
        u = nearest_direction(wx, wy)
        if u is not None:
            ca, sa = u
            wx, wy = [ca * x + sa * y for x, y in zip(wx, wy)], [-sa * x + ca * y for x, y in zip(wx, wy)]
        xmin, xmax = min(wx), max(wx)
        ymin, ymax = min(wy), max(wy)
        bbox = _interval_mass(xmin, xmax) * _interval_mass(ymin, ymax)
        if d == 1 or bbox <= accept_below or bbox == 0.0:
            return bbox
        return grid_cover_mass(wx, wy, d)

    def bbox_bound(self, dx, dy, a, b, c, radius) -> float:
        return self.m22_probability(dx, dy, a, b, c, radius, d=1)


def _cov_tuple(cov: np.ndarray) -> tuple[float, float, float]:
    return float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1])


# ---------------------------------------------------------------------------
# Validity of agent states
# ---------------------------------------------------------------------------


class ValidityChecker:
    """Per-step chance-constraint checks for one agent against obstacles, constraints and itself."""

    def __init__(
        self,
        agent: Agent,
        env,
        constraints: Sequence[BeliefConstraint],
        allocation: RiskAllocation,
        checker: CheckerConfig,
        config: PlannerConfig,
        schedule: CovarianceSchedule | None = None,
        internal_shares: dict[tuple[int, int], float] | None = None,
    ):
        self.agent = agent
        self.env = env
        self.config = config
        self.pair = PairChecker(checker)
        self.p_safe = checker.p_safe
        self.schedule = schedule or CovarianceSchedule(agent.system, agent.start.cov)
        self.constraints = list(constraints)
        self.allocation = allocation
        self.radii = [r.body.radius_bound for r in agent.robots]
        xmin, ymin, xmax, ymax = env.bounds
        self.bounds = [(xmin + R, ymin + R, xmax - R, ymax - R) for R in self.radii]
        # velocity (non-position) state bounds
        pos = {i for sl in agent.position_slices for i in sl}
        self.other_dims = np.array([i for i in range(agent.system.n) if i not in pos], dtype=int)
        self.obstacles: list[Polytope] = list(env.obstacles)
        n_obs = len(self.obstacles)
        self.p_obs = allocation.per_obstacle if n_obs else 0.0
        if n_obs and config.obstacle_mode is ObstacleMode.LINEAR:
            self.obs_k = self.pair._erf_margin(self.p_obs)
            self._obs_shapes = []
            for o in self.obstacles:
                v = o.vertices()
                center = v.mean(axis=0)
                circ = float(np.max(np.linalg.norm(v - center, axis=1)))
                # a uniform push by delta moves each vertex by delta / cos(half the normal turn)
                ang = np.sort(np.arctan2(o.normals[:, 1], o.normals[:, 0]))
                turn = np.diff(np.append(ang, ang[0] + 2 * math.pi))
                corner = float(1.0 / np.cos(0.5 * turn).min())
                self._obs_shapes.append((o, (float(center[0]), float(center[1])), circ, corner))
        self._obs_margin: dict[int, list] = {}
        self._cov: dict[int, list[tuple[float, float, float]]] = {}
        self._contour: dict[int, list[float]] = {}
        self.internal_pairs = [(a, b) for a in range(agent.size) for b in range(a + 1, agent.size)]
        self.internal_shares = internal_shares or {}
        everyone = list(range(agent.size))
        self._targets = {
            id(c): everyone if c.target_robot is None else [agent.robot_ids.index(c.target_robot)]
            for c in self.constraints
        }
        self.by_step: dict[int, list[BeliefConstraint]] = {}
        for con in self.constraints:
            for k in range(con.interval[0], con.interval[1] + 1):
                self.by_step.setdefault(k, []).append(con)
        self._con_cache: dict[int, tuple] = {}
        self.last_constraint_step = max((c.interval[1] for c in self.constraints), default=-1)

    # cached per-timestep quantities -------------------------------------------------
    def covs(self, k: int) -> list[tuple[float, float, float]]:
        out = self._cov.get(k)
        if out is None:
            gamma = self.schedule[k].gamma
            out = [_cov_tuple(gamma[np.ix_(sl, sl)]) for sl in self.agent.position_slices]
            self._cov[k] = out
        return out

    def contours(self, k: int) -> list[float]:
        out = self._contour.get(k)
        if out is None:
            out = [self.pair.contour(c) for c in self.covs(k)]
            self._contour[k] = out
        return out

    def obstacle_margins(self, k: int) -> list[list[tuple]]:
        """Per robot, per obstacle: (center, reach, [(nx, ny, margin)]) at step k."""
        out = self._obs_margin.get(k)
        if out is None:
            out = []
            for (a, b, c), R in zip(self.covs(k), self.radii):
                per_obs = []
                for obs, center, circ, corner in self._obs_shapes:
                    planes = []
                    worst = 0.0
                    for (nx, ny), off in zip(obs.normals.tolist(), obs.offsets.tolist()):
                        spread = math.sqrt(max(nx * nx * a + 2 * nx * ny * b + ny * ny * c, 0.0)) * self.obs_k
                        worst = max(worst, spread)
                        planes.append((nx, ny, off + R + spread))
                    per_obs.append((center, circ + (R + worst) * corner, planes))
                out.append(per_obs)
            self._obs_margin[k] = out
        return out

    def _constraint_data(self, con: BeliefConstraint, k: int):
        key = (id(con), k)
        data = self._con_cache.get(key)
        if data is None:
            bel = con.at(k)
            data = ((float(bel.mean[0]), float(bel.mean[1])), _cov_tuple(bel.cov), con.body.radius_bound)
            self._con_cache[key] = data
        return data

    # checks ---------------------------------------------------------------------------
    def positions(self, x: np.ndarray) -> list[tuple[float, float]]:
        return [(float(x[i]), float(x[j])) for i, j in self.agent.position_slices]

    def state_valid(self, x: np.ndarray, k: int) -> bool:
        pos = self.positions(x)
        if not self._in_bounds(x, pos):
            return False
        if not self._static_valid(pos, k):
            return False
        covs = self.covs(k)
        if not self._constraints_valid(pos, covs, k):
            return False
        return self._internal_valid(pos, covs)

    def _in_bounds(self, x, pos) -> bool:
        for (px, py), (x0, y0, x1, y1) in zip(pos, self.bounds):
            if not (x0 <= px <= x1 and y0 <= py <= y1):
                return False
        if len(self.other_dims):
            v = x[self.other_dims]
            lo = self.agent.state_low[self.other_dims]
            hi = self.agent.state_high[self.other_dims]
            if np.any(v < lo) or np.any(v > hi):
                return False
        return True

    def _static_valid(self, pos, k: int) -> bool:
        if not self.obstacles:
            return True
        if self.config.obstacle_mode is ObstacleMode.LINEAR:
            for (px, py), per_obs in zip(pos, self.obstacle_margins(k)):
                for (cx, cy), reach, planes in per_obs:
                    # every half-plane margin is below the circle bound, so far robots are separated
                    if (px - cx) ** 2 + (py - cy) ** 2 > reach * reach:
                        continue
                    for nx, ny, margin in planes:
                        if nx * px + ny * py >= margin:
                            break
                    else:
                        return False
            return True
        contours = self.contours(k)
        for (px, py), r, R in zip(pos, contours, self.radii):
            reach = r + R
            for obs in self.obstacles:
                if obs.distance_to_point((px, py)) <= reach:
                    return False
        return True

    def _constraints_valid(self, pos, covs, k: int) -> bool:
        cons = self.by_step.get(k)
        if not cons:
            return True
        valid = self.pair.valid
        for con in cons:
            mj, cj, rj = self._constraint_data(con, k)
            for r in self._targets[id(con)]:
                if not valid(pos[r], covs[r], self.radii[r], mj, cj, rj, con.p_c):
                    return False
        return True

    def _internal_valid(self, pos, covs) -> bool:
        for a, b in self.internal_pairs:
            p_c = self.internal_shares.get((a, b), self.allocation.default_pair)
            if not self.pair.valid(pos[a], covs[a], self.radii[a], pos[b], covs[b], self.radii[b], p_c):
                return False
        return True

    def goal_reached(self, x: np.ndarray, k: int) -> bool:
        contours = self.contours(k)
        for (px, py), r, robot in zip(self.positions(x), contours, self.agent.robots):
            g = robot.goal
            if math.hypot(px - g.center[0], py - g.center[1]) + r > g.radius:
                return False
        return True

    def parked_valid(self, x: np.ndarray, k: int) -> bool:
        """The terminal belief held in place must satisfy every later constraint step."""
        if self.last_constraint_step <= k:
            return True
        pos = self.positions(x)
        covs = self.covs(k)
        for t in range(k + 1, self.last_constraint_step + 1):
            if not self._constraints_valid(pos, covs, t):
                return False
        return True


# ---------------------------------------------------------------------------
# The planner
# ---------------------------------------------------------------------------


@dataclass
class _Tree:
    n: int
    capacity: int = 1024
    states: np.ndarray = field(init=False)
    steps: np.ndarray = field(init=False)
    costs: np.ndarray = field(init=False)
    parents: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    durations: list = field(default_factory=list)
    active: np.ndarray = field(init=False)
    traces: np.ndarray = field(init=False)
    size: int = 0

    def __post_init__(self):
        self.states = np.empty((self.capacity, self.n))
        self.steps = np.empty(self.capacity, dtype=int)
        self.costs = np.empty(self.capacity)
        self.active = np.zeros(self.capacity, dtype=bool)
        self.traces = np.empty(self.capacity)

    def add(self, state, step, cost, parent, control, duration, trace=0.0) -> int:
        if self.size == self.capacity:
            self.capacity *= 2
            for name in ("states", "steps", "costs", "active", "traces"):
                old = getattr(self, name)
                new = np.zeros((self.capacity,) + old.shape[1:], dtype=old.dtype)
                new[: self.size] = old[: self.size]
                setattr(self, name, new)
        i = self.size
        self.states[i] = state
        self.steps[i] = step
        self.costs[i] = cost
        self.active[i] = True
        # covariance term of the distance to a zero-covariance target; inf marks pruned nodes
        self.traces[i] = trace
        self.parents.append(parent)
        self.controls.append(control)
        self.durations.append(duration)
        self.size += 1
        return i


def plan(
    agent: Agent,
    env,
    constraints: Sequence[BeliefConstraint],
    allocation: RiskAllocation,
    checker: CheckerConfig,
    budget: PlannerBudget,
    config: PlannerConfig = PlannerConfig(),
    schedule: CovarianceSchedule | None = None,
    internal_shares: dict[tuple[int, int], float] | None = None,
    deadline: float | None = None,
) -> MotionPlan:
    """Grow a sparse belief tree from the agent's start until every robot meets its goal constraint.

    Raises :class:`StartInvalid` or :class:`BudgetExhausted` on failure.
    ``deadline`` is an absolute ``time.perf_counter`` value that caps ``budget.max_time``.
    """
    t0 = time.perf_counter()
    stop_at = deadline if deadline is not None else math.inf
    if budget.max_time is not None:
        stop_at = min(stop_at, t0 + budget.max_time)
    sys = agent.system
    vc = ValidityChecker(agent, env, constraints, allocation, checker, config, schedule, internal_shares)
    sched = vc.schedule
    rng = np.random.default_rng(budget.rng_seed)
    x0 = np.array(agent.start.mean, dtype=float)
    if not vc.state_valid(x0, 0):
        raise StartInvalid("start violates a chance constraint at step 0")
    if vc.goal_reached(x0, 0) and vc.parked_valid(x0, 0):
        return _extract(sys, sched, agent, [], x0)

    trace_table: list[float] = []

    def trace(k: int) -> float:
        if not wasserstein:
            return 0.0
        while len(trace_table) <= k:
            trace_table.append(float(np.trace(sched[len(trace_table)].gamma)))
        return trace_table[k]

    wasserstein = config.metric == "wasserstein"
    tree = _Tree(sys.n)
    tree.add(x0, 0, 0.0, -1, None, 0, trace(0))
    witnesses: list[np.ndarray] = []
    witness_rep: list[int] = []
    tw = config.witness_time_weight * sys.dt
    if config.pruning:
        witnesses.append(np.append(x0, 0.0))
        witness_rep.append(0)
    wit_arr = np.array(witnesses) if witnesses else np.empty((0, sys.n + 1))

    goal_centers = [r.goal.center for r in agent.robots]
    span = agent.state_high - agent.state_low
    u_span = agent.control_high - agent.control_low
    A, B = sys.A, sys.B
    iteration = 0
    max_iter = budget.max_iterations if budget.max_iterations is not None else math.inf
    while iteration < max_iter:
        if (iteration & 31) == 0 and time.perf_counter() > stop_at:
            break
        iteration += 1
        # sample a target state (zero covariance)
        target = agent.state_low + rng.random(sys.n) * span
        if rng.random() < config.goal_bias:
            for (i, j), c in zip(agent.position_slices, goal_centers):
                target[i], target[j] = c[0], c[1]
        n = tree.size
        diff = tree.states[:n] - target
        dist2 = np.einsum("ij,ij->i", diff, diff) + tree.traces[:n]
        near = dist2 <= config.delta_select**2
        if near.any():
            parent = int(np.argmin(np.where(near, tree.costs[:n], np.inf)))
        else:
            parent = int(np.argmin(dist2))
        # random control held for a random number of steps
        u = agent.control_low + rng.random(sys.p) * u_span
        steps = int(rng.integers(config.min_steps, config.max_steps + 1))
        x = tree.states[parent].copy()
        k = int(tree.steps[parent])
        if k + steps > config.max_horizon:
            continue
        ok = True
        reached = False
        taken = 0
        for _ in range(steps):
            x = A @ x + B @ u
            k += 1
            taken += 1
            if not vc.state_valid(x, k):
                ok = False
                break
            if vc.goal_reached(x, k) and vc.parked_valid(x, k):
                reached = True
                break
        if not ok:
            continue
        cost = float(tree.costs[parent]) + taken * sys.dt
        if config.pruning and not reached:
            key = np.append(x, k * tw)
            wd = np.einsum("ij,ij->i", wit_arr - key, wit_arr - key)
            w = int(np.argmin(wd))
            if wd[w] > config.delta_prune**2:
                wit_arr = np.vstack([wit_arr, key])
                witness_rep.append(-1)
                w = len(witness_rep) - 1
            else:
                rep = witness_rep[w]
                if rep >= 0 and tree.costs[rep] <= cost:
                    continue
                if rep >= 0:
                    tree.active[rep] = False
                    tree.traces[rep] = np.inf
            node = tree.add(x, k, cost, parent, u, taken, trace(k))
            witness_rep[w] = node
            continue
        node = tree.add(x, k, cost, parent, u, taken, trace(k))
        if reached:
            return _extract_from_tree(sys, sched, agent, tree, node)
    raise BudgetExhausted(f"no goal-satisfying node after {iteration} iterations")


def _extract_from_tree(sys, sched, agent, tree: _Tree, node: int) -> MotionPlan:
    chain = []
    while tree.parents[node] >= 0:
        chain.append((tree.controls[node], tree.durations[node]))
        node = tree.parents[node]
    controls = []
    for u, dur in reversed(chain):
        controls.extend([u] * dur)
    return _extract(sys, sched, agent, controls, agent.start.mean)


def _extract(sys, sched, agent, controls, x0) -> MotionPlan:
    T = len(controls)
    U = np.array(controls, dtype=float).reshape(T, sys.p)
    X = np.empty((T + 1, sys.n))
    X[0] = agent.start.mean
    for k in range(T):
        X[k + 1] = sys.A @ X[k] + sys.B @ U[k]
    return MotionPlan(U, X, sched.trajectory(T))


def check_node(
    agent: Agent,
    state: np.ndarray,
    timestep: int,
    env,
    constraints: Sequence[BeliefConstraint],
    allocation: RiskAllocation,
    checker: CheckerConfig,
    config: PlannerConfig = PlannerConfig(),
    schedule: CovarianceSchedule | None = None,
) -> Verdict:
    """Static, constraint and internal-pair chance checks for one propagated node."""
    vc = ValidityChecker(agent, env, constraints, allocation, checker, config, schedule)
    return Verdict.of(vc.state_valid(np.asarray(state, dtype=float), timestep))
