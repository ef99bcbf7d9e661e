"""Benchmark harnesses: checker conservatism and timing, planner seed sweeps, closed-loop plan validation."""

from __future__ import annotations

import contextlib
import csv
import math
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .cbs import SearchConfig, cc_kcbs, centralized_plan
from .chance import (
    CheckerConfig,
    collision_polytope,
    difference_belief,
    m1_check,
    m21_check,
    _place,
    m22_check,
    mc_collision_probability,
)
from .dynamics import CovarianceSchedule, MotionPlan, simulate_rollouts
from .gaussian import WorkspaceMarginal
from .geometry import Body, polygons_intersect_batch
from .scenario import GENERATORS, PlanResult, Scenario, robot_system

CSV_COLUMNS = ("method", "space_size", "pair_id", "verdict", "mc_probability", "mc_se", "elapsed_ns")
GRID_SIZES = (2, 5, 10, 25, 50)


def worker_count(default: int | None = None) -> int:
    """Worker pool size, capped by CCKCBS_THREADS when set."""
    cap = os.environ.get("CCKCBS_THREADS")
    n = default if default is not None else (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"CCKCBS_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# Checker benchmark
# ---------------------------------------------------------------------------


def random_spd(rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    return q @ np.diag(rng.uniform(lo, hi, 2)) @ q.T


def sample_pairs(n: int, space_size: float, seed: int, eig_range=(0.001, 0.05)):
    """Belief pairs with means uniform in a square box and random SPD covariances."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        bi = WorkspaceMarginal(rng.uniform(0.0, space_size, 2), random_spd(rng, *eig_range))
        bj = WorkspaceMarginal(rng.uniform(0.0, space_size, 2), random_spd(rng, *eig_range))
        pairs.append((bi, bj))
    return pairs


def method_labels(grids: Sequence[int] = GRID_SIZES) -> list[str]:
    return ["M.1", "M.2.1"] + [f"M.2.2({d})" for d in grids]


def _checker_calls(body: Body, p_safe: float, sides: int, grids: Sequence[int]):
    poly = collision_polytope(body, body, sides)
    p_c = 1.0 - p_safe

    def m1(bi, bj):
        return bool(m1_check(bi, body, bj, body, p_safe))

    def m21(bi, bj):
        return bool(m21_check(difference_belief(bi, bj), poly, p_c))

    def m22(d):
        def call(bi, bj):
            return bool(m22_check(difference_belief(bi, bj), poly, p_c, d)[1])
        return call

    return [m1, m21] + [m22(d) for d in grids]


def _mc_shard(args):
    pairs, body, samples, seeds = args
    return [mc_collision_probability(bi, body, bj, body, n=samples, seed=s) for (bi, bj), s in zip(pairs, seeds)]


@dataclass
class CheckerRow:
    method: str
    space_size: float
    pair_id: int
    verdict: str
    mc_probability: float
    mc_se: float
    elapsed_ns: int


def bench_checkers(
    space_sizes: Sequence[float] = (5.0, 10.0),
    n_pairs: int = 1000,
    p_safe: float = 0.95,
    mc_samples: int = 100_000,
    seed: int = 0,
    sides: int = 8,
    grids: Sequence[int] = GRID_SIZES,
    repeats: int = 1,
) -> list[CheckerRow]:
    """Evaluate every checker and the sampling oracle on the same random pairs.

    MC is rejected when its estimate exceeds 1 - p_safe. Timing is the
    minimum over ``repeats`` single-call measurements, taken serially.
    """
    body = Body.square(0.25)
    labels = method_labels(grids)
    calls = _checker_calls(body, p_safe, sides, grids)
    rows: list[CheckerRow] = []
    for s_index, size in enumerate(space_sizes):
        pairs = sample_pairs(n_pairs, size, seed + 7919 * s_index)
        seeds = [seed * 1_000_003 + 100_000 * s_index + i for i in range(n_pairs)]
        workers = worker_count()
        chunk = max(1, math.ceil(n_pairs / workers))
        shards = [(pairs[i:i + chunk], body, mc_samples, seeds[i:i + chunk]) for i in range(0, n_pairs, chunk)]
        with ThreadPoolExecutor(workers) as pool:
            mc = [r for shard in pool.map(_mc_shard, shards) for r in shard]
        for pid, ((bi, bj), (p, se)) in enumerate(zip(pairs, mc)):
            for label, call in zip(labels, calls):
                best = None
                for _ in range(repeats):
                    t = time.perf_counter_ns()
                    ok = call(bi, bj)
                    dt = time.perf_counter_ns() - t
                    best = dt if best is None else min(best, dt)
                rows.append(CheckerRow(label, size, pid, "valid" if ok else "reject", p, se, best))
            rows.append(CheckerRow("MC", size, pid, "valid" if p <= 1.0 - p_safe else "reject", p, se, 0))
    return rows


def _output(path):
    """Open ``path`` for CSV writing; None means standard output."""
    if path is None:
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", newline="")


def write_checker_csv(path, rows: Sequence[CheckerRow]) -> None:
    with _output(path) as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.space_size, r.pair_id, r.verdict, repr(r.mc_probability), repr(r.mc_se), r.elapsed_ns])


@dataclass
class MethodSummary:
    method: str
    space_size: float
    rejection_rate: float
    conservatism: float
    median_ns: float
    unsound: int


def summarize_checkers(rows: Sequence[CheckerRow], p_safe: float = 0.95) -> list[MethodSummary]:
    """R_z, C_z = R_z - R_MC, median call time, and Valid verdicts the oracle contradicts (beyond 3 SE)."""
    out = []
    for size in sorted({r.space_size for r in rows}):
        sub = [r for r in rows if r.space_size == size]
        methods = list(dict.fromkeys(r.method for r in sub))
        rate = {m: float(np.mean([r.verdict == "reject" for r in sub if r.method == m])) for m in methods}
        for m in methods:
            mine = [r for r in sub if r.method == m]
            unsound = sum(
                r.verdict == "valid" and r.mc_probability > (1.0 - p_safe) + 3.0 * r.mc_se for r in mine
            )
            med = statistics.median(r.elapsed_ns for r in mine) if m != "MC" else float("nan")
            out.append(MethodSummary(m, size, rate[m], rate[m] - rate["MC"], med, unsound))
    return out


def format_checker_summary(summary: Sequence[MethodSummary]) -> str:
    lines = [f"{'method':<12}{'space':>7}{'R_z':>8}{'C_z':>8}{'median ns':>12}{'unsound':>9}"]
    for s in summary:
        med = "-" if math.isnan(s.median_ns) else f"{s.median_ns:.0f}"
        lines.append(f"{s.method:<12}{s.space_size:>7g}{s.rejection_rate:>8.3f}{s.conservatism:>8.3f}{med:>12}{s.unsound:>9}")
    return "\n".join(lines)


def plot_checker_summary(summary: Sequence[MethodSummary], path_prefix) -> list[str]:
    """Bar charts of conservatism and median time per method; returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cckcbs"
    sizes = sorted({s.space_size for s in summary})
    methods = [m for m in dict.fromkeys(s.method for s in summary) if m != "MC"]
    written = []
    for key, ylabel, fname in (
        ("conservatism", "conservatism C_z", "conservatism"),
        ("median_ns", "median time per call [ns]", "timing"),
    ):
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / len(sizes)
        for k, size in enumerate(sizes):
            vals = [next(getattr(s, key) for s in summary if s.method == m and s.space_size == size) for m in methods]
            ax.bar(np.arange(len(methods)) + k * width, vals, width, label=f"{size:g} x {size:g}")
        ax.set_xticks(np.arange(len(methods)) + 0.4 - width / 2)
        ax.set_xticklabels(methods, rotation=30)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = f"{path_prefix}_{fname}.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Planner benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlannerCell:
    scenario: str
    dynamics: str
    robots: int
    checker: CheckerConfig
    allocation: str
    seed: int
    max_time: float
    iterations: int = 20_000
    merge_bound: float = 10
    centralized: bool = False


@dataclass
class PlannerOutcome:
    cell: PlannerCell
    status: str
    wall_time_s: float
    metrics: dict = field(default_factory=dict)


def build_scenario(name: str, robots: int, dynamics: str = "linear2d", p_safe: float = 0.9, seed: int = 0) -> Scenario:
    if name not in GENERATORS:
        raise ValueError(f"unknown scenario generator {name!r} (expected one of {', '.join(GENERATORS)})")
    gen = GENERATORS[name]
    if name.startswith("env32"):
        return gen(robots, dynamics, p_safe, seed=seed)
    return gen(robots, dynamics, p_safe)


def run_cell(cell: PlannerCell, scenario: Scenario | None = None) -> tuple[PlannerOutcome, PlanResult]:
    sc = scenario if scenario is not None else build_scenario(cell.scenario, cell.robots, cell.dynamics, cell.checker.p_safe)
    cfg = SearchConfig(
        checker=cell.checker,
        allocation_mode=cell.allocation,
        iterations=cell.iterations,
        merge_bound=cell.merge_bound,
        seed=cell.seed,
        max_time=cell.max_time,
    )
    t = time.perf_counter()
    result = centralized_plan(sc, cfg) if cell.centralized else cc_kcbs(sc, cfg)
    return PlannerOutcome(cell, result.status, time.perf_counter() - t, dict(result.metrics)), result


def _run_cell_only(cell: PlannerCell) -> PlannerOutcome:
    return run_cell(cell)[0]


def seed_sweep(base: PlannerCell, runs: int, base_seed: int) -> list[PlannerCell]:
    """Per-run seeds are base_seed + run index."""
    from dataclasses import replace

    return [replace(base, seed=base_seed + r) for r in range(runs)]


def bench_planner(cells: Sequence[PlannerCell], workers: int | None = None) -> list[PlannerOutcome]:
    """Run independent cells in a process pool; each cell is single-threaded."""
    n = worker_count(workers)
    if n == 1 or len(cells) == 1:
        return [_run_cell_only(c) for c in cells]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(_run_cell_only, cells))


@dataclass
class PlannerSummary:
    scenario: str
    checker: str
    robots: int
    runs: int
    success_rate: float
    mean_time_s: float
    sd_time_s: float


def summarize_planner(outcomes: Sequence[PlannerOutcome]) -> list[PlannerSummary]:
    groups: dict[tuple, list[PlannerOutcome]] = {}
    for o in outcomes:
        key = (o.cell.scenario, o.cell.checker.label + (" central" if o.cell.centralized else ""), o.cell.robots)
        groups.setdefault(key, []).append(o)
    out = []
    for (scen, label, n), items in groups.items():
        times = [o.wall_time_s for o in items if o.status == "success"]
        mean = statistics.fmean(times) if times else float("nan")
        sd = statistics.stdev(times) if len(times) > 1 else 0.0 if times else float("nan")
        out.append(PlannerSummary(scen, label, n, len(items), len(times) / len(items), mean, sd))
    return out


def write_planner_csv(path, outcomes: Sequence[PlannerOutcome]) -> None:
    with _output(path) as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "dynamics", "checker", "allocation", "robots", "seed", "centralized", "status",
                    "wall_time_s", "ct_nodes", "merges"])
        for o in outcomes:
            c = o.cell
            w.writerow([c.scenario, c.dynamics, c.checker.label, c.allocation, c.robots, c.seed, c.centralized,
                        o.status, f"{o.wall_time_s:.4f}", o.metrics.get("ct_nodes", ""), o.metrics.get("merges", "")])


def format_planner_summary(summary: Sequence[PlannerSummary]) -> str:
    lines = [f"{'scenario':<10}{'checker':<18}{'robots':>7}{'runs':>6}{'success':>9}{'time s':>16}"]
    for s in summary:
        t = "-" if math.isnan(s.mean_time_s) else f"{s.mean_time_s:.2f} ± {s.sd_time_s:.2f}"
        lines.append(f"{s.scenario:<10}{s.checker:<18}{s.robots:>7}{s.runs:>6}{s.success_rate:>9.2f}{t:>16}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Closed-loop validation of a returned plan
# ---------------------------------------------------------------------------


@dataclass
class RolloutReport:
    names: list[str]
    collisions: list[int]  # per robot, rollouts that collided at any step
    samples: int
    any_collisions: int  # rollouts in which at least one robot collided
    p_safe: float
    exits: list[int] = field(default_factory=list)  # per robot, rollouts whose body left the workspace

    @property
    def fractions(self) -> list[float]:
        return [c / self.samples for c in self.collisions]

    @property
    def worst_fraction(self) -> float:
        return max(self.fractions) if self.fractions else 0.0

    @property
    def any_fraction(self) -> float:
        return self.any_collisions / self.samples

    def interval(self, count: int) -> tuple[float, float]:
        ci = stats.binomtest(count, self.samples).proportion_ci(0.95, method="wilson")
        return float(ci.low), float(ci.high)

    @property
    def passed(self) -> bool:
        return self.worst_fraction <= 1.0 - self.p_safe

    def format(self) -> str:
        lines = []
        for name, c in zip(self.names, self.collisions):
            lo, hi = self.interval(c)
            lines.append(f"{name}: {c}/{self.samples} collided ({c / self.samples:.4f}, 95% CI {lo:.4f}-{hi:.4f})")
        if any(self.exits):
            lines.append("left the workspace (not counted as collisions): "
                         + ", ".join(f"{n} {e}/{self.samples}" for n, e in zip(self.names, self.exits)))
        lo, hi = self.interval(self.any_collisions)
        lines.append(f"any robot: {self.any_fraction:.4f} (95% CI {lo:.4f}-{hi:.4f}); "
                     f"worst robot {self.worst_fraction:.4f} vs bound {1.0 - self.p_safe:.4f}")
        return "\n".join(lines)


def _headings(states: np.ndarray, dynamics: str) -> np.ndarray:
    if dynamics == "unicycle":
        return np.arctan2(states[..., 3], states[..., 2])
    return np.zeros(states.shape[:-1])


def simulate_result(result: PlanResult, scenario: Scenario, samples: int = 500, seed: int = 0) -> list[np.ndarray]:
    """Closed-loop true-state rollouts per robot, all padded to the longest plan.

    Robots that finish early keep tracking their terminal nominal state.
    """
    if len(result.plans) != len(scenario.robots):
        raise ValueError("result does not hold one plan per scenario robot")
    horizon = max(rec.horizon for rec in result.plans)
    runs = []
    for index, (spec, rec) in enumerate(zip(scenario.robots, result.plans)):
        sys = robot_system(spec, scenario.dt)
        if rec.states.shape[1] != sys.n:
            raise ValueError(f"plan for {rec.name} has state dimension {rec.states.shape[1]}, expected {sys.n}")
        sched = CovarianceSchedule(sys, spec.start_cov)
        motion = MotionPlan(rec.controls, rec.states, sched.trajectory(rec.horizon))
        rng = np.random.default_rng([seed, index])
        x0 = rng.multivariate_normal(spec.start_mean, spec.start_cov, size=samples, method="eigh")
        runs.append(simulate_rollouts(sys, motion, x0, rng, extra_steps=horizon - rec.horizon))
    return runs


def mc_validate(result: PlanResult, scenario: Scenario, samples: int = 500, seed: int = 0) -> RolloutReport:
    """Count rollouts in which each robot hits an obstacle or touches another robot.

    Leaving the workspace rectangle is tallied separately: the planner keeps
    only the nominal footprint inside it, without a chance constraint.
    """
    runs = simulate_result(result, scenario, samples, seed)
    env = scenario.environment
    xmin, ymin, xmax, ymax = env.bounds
    n_robots = len(runs)
    hit = np.zeros((n_robots, samples), dtype=bool)
    left = np.zeros((n_robots, samples), dtype=bool)
    steps = runs[0].shape[1] if runs else 0
    obstacle_verts = [o.vertices() for o in env.obstacles]
    for k in range(steps):
        feet = []
        for r, spec in enumerate(scenario.robots):
            st = runs[r][:, k]
            fp = _place(spec.body, st[:, :2], _headings(st, spec.dynamics))
            feet.append(fp)
            outside = (fp[..., 0].min(axis=1) < xmin) | (fp[..., 0].max(axis=1) > xmax) \
                | (fp[..., 1].min(axis=1) < ymin) | (fp[..., 1].max(axis=1) > ymax)
            left[r] |= outside
            for verts in obstacle_verts:
                hit[r] |= polygons_intersect_batch(fp, np.broadcast_to(verts, (samples,) + verts.shape))
        for a in range(n_robots):
            for b in range(a + 1, n_robots):
                touch = polygons_intersect_batch(feet[a], feet[b])
                hit[a] |= touch
                hit[b] |= touch
    return RolloutReport(
        [rec.name for rec in result.plans],
        [int(h.sum()) for h in hit],
        samples,
        int(hit.any(axis=0).sum()) if n_robots else 0,
        scenario.p_safe,
        [int(e.sum()) for e in left],
    )
