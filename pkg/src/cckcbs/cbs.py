"""Constraint-tree search over per-robot belief plans, with merge-and-restart and a centralized baseline."""

from __future__ import annotations

import heapq
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chance import CheckerConfig, RiskAllocation, allocate_adaptive, allocate_equal, goal_check, split_agent_obstacle
from .dynamics import CovarianceSchedule, ExpectedBeliefState, LinearSystem, MotionPlan, compose_systems
from .gaussian import GaussianBelief, WorkspaceMarginal
from .lowlevel import (
    Agent,
    BeliefConstraint,
    BudgetExhausted,
    PairChecker,
    PlannerBudget,
    PlannerConfig,
    RobotModel,
    StartInvalid,
    ValidityChecker,
    plan,
)
from .scenario import PlanResult, RobotPlanRecord, Scenario, robot_models


@dataclass(frozen=True)
class Conflict:
    robot_i: int
    robot_j: int
    interval: tuple[int, int]

    def __post_init__(self):
        if self.robot_i == self.robot_j:
            raise ValueError("a conflict needs two distinct robots")
        if self.interval[0] > self.interval[1]:
            raise ValueError("conflict interval is empty")

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.robot_i, self.robot_j), max(self.robot_i, self.robot_j))


@dataclass
class MergeState:
    bound: float
    pairwise_conflict_counts: dict[tuple[int, int], int] = field(default_factory=dict)


def should_merge(state: MergeState, conflict: Conflict) -> bool:
    key = conflict.pair
    count = state.pairwise_conflict_counts.get(key, 0) + 1
    state.pairwise_conflict_counts[key] = count
    return count > state.bound


@dataclass(frozen=True)
class SearchConfig:
    checker: CheckerConfig = CheckerConfig("m22")
    allocation_mode: str = "equal"
    iterations: int = 20_000
    merge_bound: float = 10
    seed: int = 0
    max_time: float | None = 180.0
    planner: PlannerConfig = PlannerConfig()
    max_retries: int = 5
    include_timing: bool = False

    def __post_init__(self):
        if self.allocation_mode not in ("equal", "adaptive"):
            raise ValueError(f"unknown allocation mode {self.allocation_mode!r}")


class SearchTimeout(Exception):
    pass


class RobotInfeasible(Exception):
    def __init__(self, robots, reason: str):
        super().__init__(f"robots {tuple(robots)} infeasible: {reason}")
        self.robots = tuple(robots)
        self.reason = reason


# ---------------------------------------------------------------------------
# Tracks: per-robot position/covariance sequences used by validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Track:
    positions: list  # [(x, y)] * (T+1)
    covs: list  # [(a, b, c)] * (T+1)
    radius: float

    @property
    def horizon(self) -> int:
        return len(self.positions) - 1

    def at(self, k: int):
        k = min(k, self.horizon)
        return self.positions[k], self.covs[k]

    def marginal(self, k: int) -> WorkspaceMarginal:
        k = min(k, self.horizon)
        (x, y), (a, b, c) = self.positions[k], self.covs[k]
        return WorkspaceMarginal(np.array([x, y]), np.array([[a, b], [b, c]]))


def robot_tracks(agent: Agent, agent_plan: MotionPlan) -> list[Track]:
    tracks = []
    for (i, j), robot in zip(agent.position_slices, agent.robots):
        pos = [(float(x[i]), float(x[j])) for x in agent_plan.nominal_states]
        covs = [(float(b.gamma[i, i]), float(b.gamma[i, j]), float(b.gamma[j, j])) for b in agent_plan.beliefs]
        tracks.append(Track(pos, covs, robot.body.radius_bound))
    return tracks


def split_plan(agent: Agent, agent_plan: MotionPlan) -> list[MotionPlan]:
    """Per-robot plans from a (possibly composed) agent plan."""
    if agent.size == 1:
        return [agent_plan]
    out = []
    s_off = 0
    u_off = 0
    for robot in agent.robots:
        n, p = robot.system.n, robot.system.p
        sl = slice(s_off, s_off + n)
        beliefs = tuple(ExpectedBeliefState.from_parts(b.sigma[sl, sl], b.lambda_[sl, sl]) for b in agent_plan.beliefs)
        out.append(MotionPlan(agent_plan.controls[:, u_off : u_off + p], agent_plan.nominal_states[:, sl], beliefs))
        s_off += n
        u_off += p
    return out


# ---------------------------------------------------------------------------
# Risk allocation
# ---------------------------------------------------------------------------


class PairShares:
    """Pairwise collision-probability shares, fixed (equal) or distance-adaptive per step."""

    def __init__(self, scenario: Scenario, robots: Sequence[RobotModel], mode: str):
        self.mode = mode
        p_coll = 1.0 - scenario.p_safe
        n_obs = len(scenario.environment.obstacles)
        self.n = len(robots)
        if mode == "equal":
            self.base = allocate_equal(p_coll, n_obs, self.n)
        else:
            v_agents = sum(r.body.area() for r in robots)
            v_obs = sum(o.area() for o in scenario.environment.obstacles)
            p_agents, p_obs = split_agent_obstacle(p_coll, v_agents, v_obs)
            per_obs = p_obs / n_obs if n_obs else 0.0
            # default pair share when distances are unknown: equal split of the agent budget
            default = p_agents / max(self.n - 1, 1)
            self.base = RiskAllocation(p_coll, p_obs, {}, per_obs, default)
        self.p_coll = p_coll
        if mode == "adaptive":
            self.v_agents = sum(r.body.area() for r in robots)
            self.v_obs = sum(o.area() for o in scenario.environment.obstacles)

    def at_step(self, positions: list[tuple[float, float]]) -> dict[tuple[int, int], float]:
        """Share for every pair given the robots' current mean positions (min of both robots' views)."""
        if self.mode == "equal":
            share = self.base.default_pair
            return {(i, j): share for i in range(self.n) for j in range(i + 1, self.n)}
        views = []
        for i in range(self.n):
            dist = {}
            for j in range(self.n):
                if j != i:
                    d = math.hypot(positions[i][0] - positions[j][0], positions[i][1] - positions[j][1])
                    dist[j] = max(d, 1e-9)
            views.append(allocate_adaptive(self.p_coll, self.v_agents, self.v_obs, dist).pairwise)
        return {(i, j): min(views[i][j], views[j][i]) for i in range(self.n) for j in range(i + 1, self.n)}


# ---------------------------------------------------------------------------
# Validation and constraints
# ---------------------------------------------------------------------------


def scan_conflicts(tracks: Sequence[Track], pair: PairChecker, shares: PairShares, skip=frozenset()):
    """Earliest conflict (with its maximal consecutive interval) and the number of conflicting pairs.

    Finished robots hold their terminal belief. Pairs in ``skip`` are not checked.
    """
    n = len(tracks)
    horizon = max(t.horizon for t in tracks)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in skip]
    conflicting: set[tuple[int, int]] = set()
    first = None
    for k in range(horizon + 1):
        states = [t.at(k) for t in tracks]
        share = shares.at_step([s[0] for s in states])
        for i, j in pairs:
            if (i, j) in conflicting:
                continue
            (mi, ci), (mj, cj) = states[i], states[j]
            if not pair.valid(mi, ci, tracks[i].radius, mj, cj, tracks[j].radius, share[(i, j)]):
                conflicting.add((i, j))
                if first is None:
                    first = (i, j, k)
    if first is None:
        return None, 0
    i, j, t_s = first
    t_e = t_s
    while t_e < horizon:
        k = t_e + 1
        (mi, ci), (mj, cj) = tracks[i].at(k), tracks[j].at(k)
        share = shares.at_step([t.at(k)[0] for t in tracks])[(i, j)]
        if pair.valid(mi, ci, tracks[i].radius, mj, cj, tracks[j].radius, share):
            break
        t_e = k
    return Conflict(i, j, (t_s, t_e)), len(conflicting)


def validate_plan(tracks: Sequence[Track], checker: CheckerConfig, shares: PairShares) -> Conflict | None:
    conflict, _ = scan_conflicts(tracks, PairChecker(checker), shares)
    return conflict


def pair_share(conflict: Conflict, tracks: Sequence[Track], shares: PairShares) -> float:
    """Smallest share the pair receives over the conflict interval."""
    t_s, t_e = conflict.interval
    return min(shares.at_step([t.at(k)[0] for t in tracks])[conflict.pair] for k in range(t_s, t_e + 1))


def create_constraint(conflict: Conflict, target: int, tracks: Sequence[Track], bodies, p_c: float) -> BeliefConstraint:
    """Belief constraint on ``target`` built from the other robot's beliefs over the interval.

    Steps beyond the other robot's horizon repeat its terminal belief.
    """
    if target not in (conflict.robot_i, conflict.robot_j):
        raise ValueError("target must be one of the conflicting robots")
    other = conflict.robot_j if target == conflict.robot_i else conflict.robot_i
    t_s, t_e = conflict.interval
    beliefs = tuple(tracks[other].marginal(k) for k in range(t_s, t_e + 1))
    return BeliefConstraint(other, (t_s, t_e), beliefs, bodies[other], p_c, target_robot=target)


# ---------------------------------------------------------------------------
# Constraint tree
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CTNode:
    id: int
    parent: int | None
    plans: dict  # agent index -> MotionPlan or None
    constraints: dict  # agent index -> tuple[BeliefConstraint, ...]
    conflict_count: int = 0
    pending: int | None = None
    failures: int = 0
    conflict: Conflict | None = None

    def __lt__(self, other):
        return (self.conflict_count, self.id) < (other.conflict_count, other.id)


def compose_meta(systems: Sequence[LinearSystem], starts: Sequence[GaussianBelief]) -> tuple[LinearSystem, GaussianBelief]:
    if len(systems) < 2:
        raise ValueError("composition needs at least two systems")
    from scipy.linalg import block_diag

    sys = compose_systems(systems)
    start = GaussianBelief(np.concatenate([s.mean for s in starts]), block_diag(*[s.cov for s in starts]))
    return sys, start


class _Search:
    """One run of the constraint-tree search over a fixed partition of the robots into agents."""

    def __init__(self, scenario, robots, groups, config: SearchConfig, merge_state, deadline, counters, trace):
        self.scenario = scenario
        self.env = scenario.environment
        self.robots = robots
        self.groups = groups
        self.config = config
        self.merge_state = merge_state
        self.deadline = deadline
        self.counters = counters
        self.trace = trace
        self.pair = PairChecker(config.checker)
        self.shares = PairShares(scenario, robots, config.allocation_mode)
        self.agents = [Agent.of(g, [robots[i] for i in g]) for g in groups]
        self.schedules = [CovarianceSchedule(a.system, a.start.cov) for a in self.agents]
        self.agent_of = {r: a for a, g in enumerate(groups) for r in g}
        self.bodies = [r.body for r in robots]
        self.skip = frozenset(
            (i, j) for g in groups for i in g for j in g if i < j
        )
        self.ids = itertools.count()
        self.t0 = time.perf_counter()

    def _internal_shares(self, agent: Agent) -> dict:
        base = self.shares.base.default_pair
        return {(a, b): base for a in range(agent.size) for b in range(a + 1, agent.size)}

    def replan(self, a: int, constraints) -> MotionPlan:
        if time.perf_counter() > self.deadline:
            raise SearchTimeout()
        seed = self.config.seed + self.counters["replans"]
        self.counters["replans"] += 1
        budget = PlannerBudget(max_iterations=self.config.iterations, rng_seed=seed)
        agent = self.agents[a]
        return plan(
            agent,
            self.env,
            constraints,
            self.shares.base,
            self.config.checker,
            budget,
            self.config.planner,
            schedule=self.schedules[a],
            internal_shares=self._internal_shares(agent),
            deadline=self.deadline,
        )

    def tracks(self, plans) -> list[Track]:
        out: list = [None] * len(self.robots)
        for a, agent in enumerate(self.agents):
            for rid, track in zip(agent.robot_ids, robot_tracks(agent, plans[a])):
                out[rid] = track
        return out

    def log(self, node: CTNode, event: str, **extra):
        if self.trace is not None:
            rec = {
                "id": node.id,
                "parent": node.parent,
                "event": event,
                "conflict": None
                if node.conflict is None
                else [node.conflict.robot_i, node.conflict.robot_j, list(node.conflict.interval)],
                "replanned": None if node.pending is None else list(self.groups[node.pending]),
                "elapsed": round(time.perf_counter() - self.t0, 6) if self.config.include_timing else None,
            }
            rec.update(extra)
            self.trace.append(rec)

    def root(self) -> CTNode:
        plans = {}
        for a, agent in enumerate(self.agents):
            last = None
            for _ in range(self.config.max_retries):
                try:
                    plans[a] = self.replan(a, ())
                    break
                except StartInvalid as exc:
                    raise RobotInfeasible(agent.robot_ids, exc.reason) from None
                except BudgetExhausted as exc:
                    last = exc
            else:
                raise RobotInfeasible(agent.robot_ids, last.reason)
        node = CTNode(next(self.ids), None, plans, {a: () for a in range(len(self.agents))})
        _, node.conflict_count = scan_conflicts(self.tracks(plans), self.pair, self.shares, self.skip)
        self.log(node, "root", conflicts=node.conflict_count)
        return node

    def run(self):
        """Returns ("success", plans) or ("merge", conflict); raises on timeout/exhaustion."""
        queue = [self.root()]
        while queue:
            if time.perf_counter() > self.deadline:
                raise SearchTimeout()
            node = heapq.heappop(queue)
            if node.pending is not None:
                a = node.pending
                try:
                    new_plan = self.replan(a, node.constraints[a])
                except BudgetExhausted:
                    node.failures += 1
                    if node.failures < self.config.max_retries:
                        node.conflict_count += 1
                        heapq.heappush(queue, node)
                        self.log(node, "replan_failed", retry=node.failures, conflicts=node.conflict_count)
                    else:
                        self.log(node, "discarded")
                    continue
                except StartInvalid:
                    self.log(node, "discarded", reason="start_invalid")
                    continue
                node.plans = dict(node.plans)
                node.plans[a] = new_plan
                _, node.conflict_count = scan_conflicts(self.tracks(node.plans), self.pair, self.shares, self.skip)
                self.log(node, "replanned", conflicts=node.conflict_count)
                node.pending = None
                heapq.heappush(queue, node)
                continue
            self.counters["ct_nodes"] += 1
            self.log(node, "expanded", conflicts=node.conflict_count)
            tracks = self.tracks(node.plans)
            conflict, _ = scan_conflicts(tracks, self.pair, self.shares, self.skip)
            if conflict is None:
                self.log(node, "solution")
                return "success", node.plans
            if should_merge(self.merge_state, conflict):
                self.log(node, "merge", pair=list(conflict.pair))
                return "merge", conflict
            self.counters["conflicts"] += 1
            p_c = pair_share(conflict, tracks, self.shares)
            for target in (conflict.robot_i, conflict.robot_j):
                a = self.agent_of[target]
                con = create_constraint(conflict, target, tracks, self.bodies, p_c)
                constraints = dict(node.constraints)
                constraints[a] = node.constraints[a] + (con,)
                plans = dict(node.plans)
                plans[a] = None
                child = CTNode(next(self.ids), node.id, plans, constraints, node.conflict_count, a, 0, conflict)
                heapq.heappush(queue, child)
                self.log(child, "created", conflicts=child.conflict_count,
                         constraints=sum(len(c) for c in constraints.values()))
        raise BudgetExhausted("constraint tree exhausted")


def _result(status, scenario, robots, groups, agents, plans, counters, config, t0, extra=None) -> PlanResult:
    metrics = {
        "ct_nodes": counters["ct_nodes"],
        "conflicts": counters["conflicts"],
        "merges": counters["merges"],
        "replans": counters["replans"],
    }
    if config.include_timing:
        metrics["wall_time_s"] = time.perf_counter() - t0
    if extra:
        metrics.update(extra)
    records = []
    if plans is not None:
        per_robot: list = [None] * len(robots)
        for a, agent in enumerate(agents):
            for rid, p in zip(agent.robot_ids, split_plan(agent, plans[a])):
                per_robot[rid] = p
        for spec, robot, p in zip(scenario.robots, robots, per_robot):
            records.append(RobotPlanRecord.from_plan(spec.name, p, robot.system.position_indices))
    cfg = {
        "checker": config.checker.label,
        "p_safe": scenario.p_safe,
        "allocation": config.allocation_mode,
        "iterations": config.iterations,
        "merge_bound": None if math.isinf(config.merge_bound) else config.merge_bound,
        "seed": config.seed,
        "groups": [list(g) for g in groups],
    }
    return PlanResult(status, tuple(records), metrics, cfg)


def cc_kcbs(
    scenario: Scenario,
    config: SearchConfig = SearchConfig(),
    trace: list | None = None,
    groups=None,
) -> PlanResult:
    """Constraint-tree search with merge-and-restart; returns a PlanResult in every case.

    ``groups`` optionally starts from a partition of robot indices into agents.
    """
    t0 = time.perf_counter()
    run = _Run(scenario, config, trace, t0)
    start = [(i,) for i in range(len(run.robots))] if groups is None else sorted(tuple(sorted(g)) for g in groups)
    return run.solve(start)


def merge_and_restart(scenario: Scenario, groups, pair, config: SearchConfig = SearchConfig(), trace=None) -> PlanResult:
    """Compose the agents holding ``pair`` into one meta-robot and restart the search."""
    return cc_kcbs(scenario, config, trace, merge_groups(groups, pair))


class _Run:
    def __init__(self, scenario, config, trace, t0):
        self.scenario = scenario
        self.config = config
        self.trace = trace
        self.t0 = t0
        self.deadline = t0 + config.max_time if config.max_time is not None else math.inf
        self.robots = robot_models(scenario)
        self.merge_state = MergeState(config.merge_bound)
        self.counters = {"ct_nodes": 0, "conflicts": 0, "merges": 0, "replans": 0}

    def result(self, status, groups, agents, plans=None, extra=None):
        return _result(status, self.scenario, self.robots, groups, agents, plans, self.counters, self.config,
                       self.t0, extra)

    def solve(self, groups) -> PlanResult:
        search = _Search(self.scenario, self.robots, groups, self.config, self.merge_state, self.deadline,
                         self.counters, self.trace)
        try:
            outcome, payload = search.run()
        except SearchTimeout:
            return self.result("timeout", groups, search.agents)
        except RobotInfeasible as exc:
            return self.result("infeasible", groups, search.agents, extra={"reason": exc.reason, "robots": list(exc.robots)})
        except BudgetExhausted:
            return self.result("infeasible", groups, search.agents, extra={"reason": "tree_exhausted"})
        if outcome == "success":
            return self.result("success", groups, search.agents, payload)
        self.counters["merges"] += 1
        return self.solve(merge_groups(groups, payload.pair))


def merge_groups(groups, pair) -> list[tuple[int, ...]]:
    """Replace the agents holding the two robots by their union (team size drops by one)."""
    i, j = pair
    gi = next(g for g in groups if i in g)
    gj = next(g for g in groups if j in g)
    if gi == gj:
        raise ValueError("robots already share an agent")
    merged = tuple(sorted(gi + gj))
    out = [g for g in groups if g not in (gi, gj)]
    out.append(merged)
    return sorted(out)


def centralized_plan(scenario: Scenario, config: SearchConfig = SearchConfig()) -> PlanResult:
    """Plan all robots as one composed meta-robot with the low-level planner."""
    t0 = time.perf_counter()
    robots = robot_models(scenario)
    group = tuple(range(len(robots)))
    agent = Agent.of(group, robots)
    shares = PairShares(scenario, robots, config.allocation_mode)
    internal = {(a, b): shares.base.default_pair for a in range(agent.size) for b in range(a + 1, agent.size)}
    budget = PlannerBudget(max_iterations=None, max_time=config.max_time, rng_seed=config.seed)
    counters = {"ct_nodes": 0, "conflicts": 0, "merges": 0, "replans": 1}
    try:
        p = plan(agent, scenario.environment, (), shares.base, config.checker, budget, config.planner,
                 internal_shares=internal)
    except StartInvalid as exc:
        return _result("infeasible", scenario, robots, [group], [agent], None, counters, config, t0,
                       {"reason": exc.reason})
    except BudgetExhausted:
        return _result("timeout", scenario, robots, [group], [agent], None, counters, config, t0)
    return _result("success", scenario, robots, [group], [agent], {0: p}, counters, config, t0)


# ---------------------------------------------------------------------------
# Post-hoc checks
# ---------------------------------------------------------------------------


def result_tracks(result: PlanResult, scenario: Scenario) -> list[Track]:
    return [
        Track(
            [(float(x[0]), float(x[1])) for x in rec.states],
            [(float(c[0, 0]), float(c[0, 1]), float(c[1, 1])) for c in rec.position_cov],
            spec.body.radius_bound,
        )
        for rec, spec in zip(result.plans, scenario.robots)
    ]


def verify_solution(result: PlanResult, scenario: Scenario, config: SearchConfig) -> list[str]:
    """Re-check a returned solution; returns human-readable problems (empty when sound)."""
    problems = []
    robots = robot_models(scenario)
    shares = PairShares(scenario, robots, config.allocation_mode)
    tracks = result_tracks(result, scenario)
    conflict = validate_plan(tracks, config.checker, shares)
    if conflict is not None:
        problems.append(f"pairwise conflict {conflict}")
    for rid, (robot, rec) in enumerate(zip(robots, result.plans)):
        agent = Agent.of((rid,), [robot])
        vc = ValidityChecker(agent, scenario.environment, (), shares.base, config.checker, config.planner)
        for k, x in enumerate(rec.states):
            if not vc.state_valid(np.asarray(x), k):
                problems.append(f"{rec.name}: step {k} violates a static chance constraint")
                break
        bel = GaussianBelief(rec.states[-1], vc.schedule[rec.horizon].gamma)
        if not goal_check(bel, robot.goal, scenario.p_safe, robot.system.position_indices):
            problems.append(f"{rec.name}: terminal belief misses the goal")
    return problems


def write_trace(path, trace: list) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
