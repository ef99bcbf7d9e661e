"""End-to-end acceptance checks, one verdict line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts appear under
"acceptance criteria" in the terminal summary. Criteria that this
implementation does not reach are strict xfails, so they stay visible and a
surprise pass is reported.
"""

import time

import numpy as np
import pytest

from cckcbs.bench import (
    PlannerCell,
    bench_checkers,
    build_scenario,
    mc_validate,
    method_labels,
    random_spd,
    run_cell,
    summarize_checkers,
)
from cckcbs.chance import CheckerConfig, collision_polytope, m22_probability
from cckcbs.dynamics import ExpectedBeliefState, expected_belief_step, make_linear2d_system, rollout_plan, simulate_rollouts
from cckcbs.gaussian import GaussianBelief, WorkspaceMarginal
from cckcbs.geometry import Body
from cckcbs.scenario import dumps_result

P_SAFE_CHECKERS = 0.95
SQUARE = Body.square(0.25)


# checker benchmark: criteria 1-3 --------------------------------------------------------------


@pytest.fixture(scope="module")
def checker_bench():
    t = time.perf_counter()
    rows = bench_checkers((5.0, 10.0), n_pairs=1000, p_safe=P_SAFE_CHECKERS, mc_samples=100_000, seed=0, repeats=3)
    elapsed = time.perf_counter() - t
    summary = {(s.method, s.space_size): s for s in summarize_checkers(rows, P_SAFE_CHECKERS)}
    return summary, elapsed


def test_criterion_1_soundness(checker_bench, criterion):
    summary, elapsed = checker_bench
    unsound = {f"{m}@{size:g}": s.unsound for (m, size), s in summary.items() if m != "MC"}
    total = sum(unsound.values())
    ok = total == 0 and elapsed < 300
    criterion(1, "checker soundness", ok, f"unsound valid verdicts={total} over 2x1000 pairs, runtime {elapsed:.0f}s (<300s)")
    assert total == 0, unsound
    assert elapsed < 300


ORDERED = ["M.1", "M.2.1", "M.2.2(2)", "M.2.2(5)", "M.2.2(10)"]


def test_criterion_2a_conservatism_ordering(checker_bench, criterion):
    summary, _ = checker_bench
    problems = []
    parts = []
    for size in (5.0, 10.0):
        cs = [summary[(m, size)].conservatism for m in ORDERED]
        parts.append(f"{size:g}x{size:g}: " + " >= ".join(f"{c:.3f}" for c in cs))
        problems += [f"{size:g}: {a} < {b}" for a, b, ca, cb in zip(ORDERED, ORDERED[1:], cs, cs[1:]) if ca < cb]
        if cs[-1] < -0.01:
            problems.append(f"{size:g}: {ORDERED[-1]} below -0.01")
    criterion("2a", "conservatism ordering", not problems, "; ".join(parts))
    assert not problems


@pytest.mark.xfail(strict=True, reason="M.1 conservatism scales with 1/area under the fixed pair sampling")
def test_criterion_2b_conservatism_across_spaces(checker_bench, criterion):
    summary, _ = checker_bench
    bad = []
    parts = []
    for m in method_labels():
        small, large = summary[(m, 5.0)].conservatism, summary[(m, 10.0)].conservatism
        parts.append(f"{m} {small:.3f}/{large:.3f}")
        if small > large + 0.02:
            bad.append(m)
    criterion("2b", "C(5x5) <= C(10x10)+0.02", not bad, f"violations {bad or 'none'}; " + ", ".join(parts))
    assert not bad


def test_criterion_3_timing_ordering(checker_bench, criterion):
    summary, _ = checker_bench
    methods = ["M.1", "M.2.1", "M.2.2(2)", "M.2.2(10)", "M.2.2(50)"]
    ok = True
    parts = []
    for size in (5.0, 10.0):
        med = [summary[(m, size)].median_ns for m in methods]
        ok &= all(a < b for a, b in zip(med, med[1:]))
        parts.append(f"{size:g}x{size:g}: " + " < ".join(f"{v / 1000:.1f}us" for v in med))
    criterion(3, "timing ordering", ok, "; ".join(parts))
    assert ok


# grid convergence: criterion 4 ----------------------------------------------------------------


def convergence_instances(count=100, samples=1_000_000, seed=0):
    """Random difference beliefs whose polytope mass is large enough for a 1e6-sample estimate to resolve 2%."""
    rng = np.random.default_rng(seed)
    poly = collision_polytope(SQUARE, SQUARE)
    out = []
    while len(out) < count:
        diff = WorkspaceMarginal(rng.uniform(-1.0, 1.0, 2), random_spd(rng, 0.002, 0.1))
        pts = rng.multivariate_normal(diff.mean, diff.cov, size=samples, method="eigh")
        mass = float(poly.contains_many(pts).mean())
        if mass >= 0.05:
            out.append((diff, mass))
    return poly, out


@pytest.fixture(scope="module")
def grid_runs():
    poly, instances = convergence_instances()
    grids = (1, 2, 5, 10, 25, 50)
    return [([m22_probability(diff, poly, d) for d in grids], mass) for diff, mass in instances]


def test_criterion_4a_grid_monotone(grid_runs, criterion):
    rises = [max(b - a for a, b in zip(ps, ps[1:])) for ps, _ in grid_runs]
    worst = max(rises)
    ok = worst <= 1e-12
    criterion("4a", "p_poly non-increasing in d", ok, f"largest increase {worst:.2e} over 100 instances")
    assert ok


@pytest.mark.xfail(strict=True, reason="the bounding-box grid cover keeps a corner excess at d=50")
def test_criterion_4b_grid_convergence(grid_runs, criterion):
    rel = np.array([abs(ps[-1] - mass) / mass for ps, mass in grid_runs])
    within = int(np.sum(rel <= 0.02))
    ok = within == len(rel)
    criterion("4b", "d=50 within 2% of MC mass", ok,
              f"{within}/{len(rel)} within 2%; relative error median {np.median(rel):.3f}, max {rel.max():.3f}")
    assert ok


# expected belief: criterion 5 ------------------------------------------------------------------


def test_criterion_5_expected_belief(criterion):
    sys = make_linear2d_system(0.1, 0.1)
    eye = np.eye(2)
    one = expected_belief_step(sys, ExpectedBeliefState.initial(0.01 * eye))
    hand = max(np.abs(one.sigma - 0.0066667 * eye).max(), np.abs(one.lambda_ - 0.0133333 * eye).max())
    exact = max(np.abs(one.sigma - (0.02 / 3) * eye).max(), np.abs(one.lambda_ - (0.04 / 3) * eye).max())
    x0 = GaussianBelief([0.0, 0.0], 0.01 * eye)
    plan = rollout_plan(sys, x0, [[0.2, 0.1]] * 20)
    rng = np.random.default_rng(2024)
    runs = simulate_rollouts(sys, plan, rng.multivariate_normal(x0.mean, x0.cov, size=5000), rng)
    errors = []
    for k in range(1, 21):
        dev = runs[:, k] - plan.nominal_states[k]
        emp = dev.T @ dev / len(dev)
        gamma = plan.beliefs[k].gamma
        errors.append(np.linalg.norm(emp - gamma) / np.linalg.norm(gamma))
    # the printed example values carry 7 decimals, so they agree to 5e-8; the closed form agrees to 1e-9
    ok = exact <= 1e-9 and hand <= 5e-8 and max(errors) <= 0.10
    criterion(5, "expected belief", ok,
              f"one-step error vs 0.02/3, 0.04/3: {exact:.1e}; worst Frobenius rel error k<=20: {max(errors):.3f}")
    assert ok


# end-to-end planning: criteria 6, 7, 9 ------------------------------------------------------


SEEDS = range(20)
ENV8_CELLS = {
    "4 robots M.2.2(5)": (4, CheckerConfig("m22", grid_divisions=5, p_safe=0.9)),
    "8 robots M.2.2(2)": (8, CheckerConfig("m22", grid_divisions=2, p_safe=0.9)),
    "4 robots M.1": (4, CheckerConfig("m1", p_safe=0.9)),
}


def env8_cell(robots, checker, seed):
    return PlannerCell("env8", "linear2d", robots, checker, "equal", seed, 180.0)


@pytest.fixture(scope="module")
def env8_runs():
    runs = {}
    for label, (robots, checker) in ENV8_CELLS.items():
        runs[label] = [run_cell(env8_cell(robots, checker, seed)) for seed in SEEDS]
    return runs


def success_rate(runs):
    return sum(out.status == "success" for out, _ in runs) / len(runs)


def test_criterion_6_env8(env8_runs, criterion):
    rates = {label: success_rate(runs) for label, runs in env8_runs.items()}
    times = {}
    for label, runs in env8_runs.items():
        solved = [out.wall_time_s for out, _ in runs if out.status == "success"]
        times[label] = f"mean {np.mean(solved):.1f}s" if solved else "none solved"
    ok = rates["4 robots M.2.2(5)"] >= 0.8 and rates["8 robots M.2.2(2)"] >= 0.5 and rates["4 robots M.1"] <= 0.2
    detail = ", ".join(f"{label}: {rates[label]:.2f} ({times[label]})" for label in ENV8_CELLS)
    criterion(6, "Env8 success rates", ok, detail + "; needs >=0.8, >=0.5, <=0.2")
    assert ok


def test_criterion_7_plan_robustness(env8_runs, criterion):
    worst, fractions = [], []
    for runs in env8_runs.values():
        for out, result in runs:
            if out.status != "success":
                continue
            report = mc_validate(result, run_scenario(out.cell), samples=500, seed=out.cell.seed)
            worst.append(report.worst_fraction)
            fractions += report.fractions
    ok = bool(worst) and max(worst) <= 0.10
    criterion(7, "closed-loop collision fraction", ok,
              f"{len(worst)} plans; worst robot {max(worst, default=float('nan')):.3f} (bound 0.10), "
              f"mean per robot {np.mean(fractions):.4f}, share above 0.05: {np.mean(np.array(fractions) > 0.05):.3f}")
    assert ok


def run_scenario(cell):
    return build_scenario(cell.scenario, cell.robots, cell.dynamics, cell.checker.p_safe)


def test_criterion_9_determinism(env8_runs, criterion):
    mismatched = []
    for label, runs in env8_runs.items():
        for out, result in runs:
            _, again = run_cell(out.cell)
            if dumps_result(again) != dumps_result(result):
                mismatched.append(f"{label} seed {out.cell.seed}")
    total = sum(len(r) for r in env8_runs.values())
    criterion(9, "determinism", not mismatched, f"{total - len(mismatched)}/{total} repeated runs byte-identical")
    assert not mismatched


# centralized planner: criterion 8 ------------------------------------------------------------


CENTRAL = CheckerConfig("m22", grid_divisions=5, p_safe=0.9)


def central_rate(robots):
    cells = [PlannerCell("open8", "linear2d", robots, CENTRAL, "equal", seed, 180.0, centralized=True) for seed in SEEDS]
    return sum(run_cell(c)[0].status == "success" for c in cells) / len(cells)


def test_criterion_8a_centralized_two_robots(criterion):
    rate = central_rate(2)
    criterion("8a", "centralized 2 robots", rate >= 0.9, f"success {rate:.2f} (needs >=0.9)")
    assert rate >= 0.9


@pytest.mark.xfail(strict=True, reason="a three-robot meta-belief still solves quickly in the open 8x8 workspace")
def test_criterion_8b_centralized_three_robots(criterion):
    rate = central_rate(3)
    criterion("8b", "centralized 3 robots", rate <= 0.3, f"success {rate:.2f} (needs <=0.3)")
    assert rate <= 0.3


# unicycle: criterion 10 ----------------------------------------------------------------------


def test_criterion_10_unicycle(criterion):
    checker = CheckerConfig("m22", grid_divisions=2, p_safe=0.9)
    cells = [PlannerCell("env8", "unicycle", 2, checker, "equal", seed, 180.0) for seed in SEEDS]
    rate = sum(run_cell(c)[0].status == "success" for c in cells) / len(cells)
    criterion(10, "unicycle Env8", rate >= 0.9, f"success {rate:.2f} (needs >=0.9)")
    assert rate >= 0.9
