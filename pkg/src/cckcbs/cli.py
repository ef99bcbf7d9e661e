"""Command-line entry points: plan, mc-validate, bench-checkers, bench-planner, plot.

Exit codes: 0 success, 1 usage or input error, 2 planner timeout, 3 infeasible,
4 closed-loop validation over the collision bound.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .bench import (
    PlannerCell,
    bench_checkers,
    bench_planner,
    format_checker_summary,
    format_planner_summary,
    mc_validate,
    plot_checker_summary,
    seed_sweep,
    summarize_checkers,
    summarize_planner,
    write_checker_csv,
    write_planner_csv,
)
from .cbs import SearchConfig, cc_kcbs, centralized_plan, write_trace
from .chance import CheckerConfig
from .scenario import GENERATORS, Scenario, ScenarioError, load_result, load_scenario, plot_plan, save_result

EXIT_OK, EXIT_USAGE, EXIT_TIMEOUT, EXIT_INFEASIBLE, EXIT_UNSAFE = 0, 1, 2, 3, 4
STATUS_EXIT = {"success": EXIT_OK, "timeout": EXIT_TIMEOUT, "infeasible": EXIT_INFEASIBLE}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _say(*parts):
    print(*parts, file=sys.stderr)


def _checker_flags(p: argparse.ArgumentParser, default="m22"):
    p.add_argument("--checker", choices=["m1", "m21", "m22"], default=default)
    p.add_argument("--grid", type=int, default=5, metavar="D", help="grid divisions per axis for m22")
    p.add_argument("--sides", type=int, default=8, metavar="NS", help="sides of the collision polygon")


def _search_flags(p: argparse.ArgumentParser):
    _checker_flags(p)
    p.add_argument("--alloc", choices=["equal", "adaptive"], default="equal")
    p.add_argument("--psafe", type=float, default=None, help="override the scenario's p_safe")
    p.add_argument("-N", dest="iterations", type=int, default=20_000, help="low-level iteration budget per replan")
    p.add_argument("-B", dest="merge_bound", type=float, default=10, help="merge bound on conflicts per pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-time", type=float, default=180.0, help="wall-clock limit in seconds")
    p.add_argument("--centralized", action="store_true", help="plan all robots as one composed system")


def _scenario_flags(p: argparse.ArgumentParser, required=True):
    p.add_argument("--scenario", required=required, help="scenario JSON file or generator name (%s)" % ", ".join(GENERATORS))
    p.add_argument("--robots", type=int, default=None, help="robot count for generators, or a prefix of a file's robots")
    p.add_argument("--dynamics", choices=["linear2d", "unicycle"], default="linear2d", help="dynamics for generators")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cckcbs", description="Chance-constrained multi-robot belief planning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="plan for every robot of a scenario")
    _scenario_flags(p)
    _search_flags(p)
    p.add_argument("--out", default="result.json", help="where to write the result JSON")
    p.add_argument("--plot", default=None, help="optional SVG figure of the plan")
    p.add_argument("--trace", default=None, help="optional JSONL trace of the constraint-tree search")

    p = sub.add_parser("mc-validate", help="closed-loop Monte Carlo check of a plan result")
    _scenario_flags(p)
    p.add_argument("--result", required=True)
    p.add_argument("--mc-samples", type=int, default=500, help="rollouts per robot")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON report")

    p = sub.add_parser("bench-checkers", help="conservatism and timing of the collision checkers")
    p.add_argument("--runs", type=int, default=1000, help="belief pairs per space size")
    p.add_argument("--mc-samples", type=int, default=100_000)
    p.add_argument("--psafe", type=float, default=0.95)
    p.add_argument("--sides", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3, help="timing repeats per call (minimum kept)")
    p.add_argument("--out", default=None, help="CSV path (default: standard output)")
    p.add_argument("--plot", default=None, help="figure path prefix; writes <prefix>_conservatism.svg and _timing.svg")

    p = sub.add_parser("bench-planner", help="success rate and time over a seed sweep")
    p.add_argument("--scenario", default="env8", choices=sorted(GENERATORS))
    p.add_argument("--robots", default="2,4,8", help="comma-separated robot counts")
    p.add_argument("--dynamics", choices=["linear2d", "unicycle"], default="linear2d")
    _search_flags(p)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--out", default=None, help="CSV of per-run outcomes (default: standard output)")
    p.add_argument("--plot", default=None, help="optional SVG bar chart of success rates")

    p = sub.add_parser("plot", help="render a plan result")
    _scenario_flags(p)
    p.add_argument("--result", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--every", type=int, default=5, help="draw a contour ellipse every this many steps")
    return parser


# ---------------------------------------------------------------------------
# Flag resolution
# ---------------------------------------------------------------------------


def resolve_scenario(args) -> Scenario:
    name = args.scenario
    if os.path.exists(name):
        try:
            sc = load_scenario(name)
        except (ScenarioError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read scenario {name}: {exc}") from None
        if args.robots is not None:
            if not 1 <= args.robots <= len(sc.robots):
                raise UsageError(f"--robots must lie in 1..{len(sc.robots)} for {name}")
            sc = sc.subset(args.robots)
    elif name in GENERATORS:
        kwargs = {} if args.robots is None else {"n_robots": args.robots}
        try:
            sc = GENERATORS[name](dynamics=args.dynamics, **kwargs)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        raise UsageError(f"scenario file not found: {name}")
    psafe = getattr(args, "psafe", None)
    if psafe is not None:
        try:
            sc = Scenario(sc.environment, sc.robots, sc.dt, psafe, dict(sc.defaults))
        except ScenarioError as exc:
            raise UsageError(str(exc)) from None
    return sc


def resolve_search(args, p_safe: float) -> SearchConfig:
    try:
        checker = CheckerConfig(args.checker, polytope_sides=args.sides, grid_divisions=args.grid, p_safe=p_safe)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.iterations < 1:
        raise UsageError("-N must be positive")
    if args.merge_bound < 0:
        raise UsageError("-B must be non-negative")
    if args.max_time is not None and args.max_time <= 0:
        raise UsageError("--max-time must be positive")
    return SearchConfig(
        checker=checker,
        allocation_mode=args.alloc,
        iterations=args.iterations,
        merge_bound=args.merge_bound,
        seed=args.seed,
        max_time=args.max_time,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_plan(args) -> int:
    scenario = resolve_scenario(args)
    config = resolve_search(args, scenario.p_safe)
    trace = [] if args.trace else None
    t0 = time.perf_counter()
    if args.centralized:
        result = centralized_plan(scenario, config)
    else:
        result = cc_kcbs(scenario, config, trace)
    elapsed = time.perf_counter() - t0
    save_result(args.out, result)
    if trace is not None:
        write_trace(args.trace, trace)
    if args.plot and result.success:
        plot_plan(result, scenario, args.plot)
    m = result.metrics
    _say(f"{result.status} in {elapsed:.2f} s: {m.get('ct_nodes', 0)} CT nodes, "
         f"{m.get('conflicts', 0)} conflicts, {m.get('merges', 0)} merges; result written to {args.out}")
    return STATUS_EXIT[result.status]


def _load_result_for(args, scenario):
    try:
        result = load_result(args.result)
    except FileNotFoundError:
        raise UsageError(f"result file not found: {args.result}") from None
    except (ScenarioError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read result {args.result}: {exc}") from None
    if not result.success:
        raise UsageError(f"result {args.result} holds no plan (status {result.status})")
    if [p.name for p in result.plans] != [r.name for r in scenario.robots]:
        raise UsageError("result robots do not match the scenario robots")
    return result


def cmd_mc_validate(args) -> int:
    scenario = resolve_scenario(args)
    result = _load_result_for(args, scenario)
    if args.mc_samples < 1:
        raise UsageError("--mc-samples must be positive")
    try:
        report = mc_validate(result, scenario, args.mc_samples, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _say(report.format())
    if args.out:
        doc = {
            "samples": report.samples,
            "p_safe": report.p_safe,
            "robots": [
                {"name": n, "collisions": c, "fraction": c / report.samples, "ci95": list(report.interval(c))}
                for n, c in zip(report.names, report.collisions)
            ],
            "any_fraction": report.any_fraction,
            "worst_fraction": report.worst_fraction,
            "passed": report.passed,
        }
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK if report.passed else EXIT_UNSAFE


def cmd_bench_checkers(args) -> int:
    if args.runs < 1 or args.mc_samples < 1:
        raise UsageError("--runs and --mc-samples must be positive")
    if not 0.5 < args.psafe < 1.0:
        raise UsageError("--psafe must lie in (0.5, 1)")
    rows = bench_checkers(n_pairs=args.runs, p_safe=args.psafe, mc_samples=args.mc_samples, seed=args.seed,
                          sides=args.sides, repeats=args.repeats)
    summary = summarize_checkers(rows, args.psafe)
    write_checker_csv(args.out, rows)
    _say(format_checker_summary(summary))
    if args.plot:
        for path in plot_checker_summary(summary, args.plot):
            _say(f"wrote {path}")
    return EXIT_OK


def _plot_success(summary, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cckcbs"
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{s.checker}\n{s.robots} robots" for s in summary]
    ax.bar(range(len(summary)), [s.success_rate for s in summary], color="0.4")
    ax.set_xticks(range(len(summary)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def cmd_bench_planner(args) -> int:
    try:
        counts = [int(c) for c in args.robots.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--robots must be comma-separated integers, got {args.robots!r}") from None
    if not counts or args.runs < 1:
        raise UsageError("need at least one robot count and one run")
    p_safe = args.psafe if args.psafe is not None else 0.9
    config = resolve_search(args, p_safe)
    cells = []
    for n in counts:
        base = PlannerCell(args.scenario, args.dynamics, n, config.checker, config.allocation_mode, args.seed,
                           config.max_time, config.iterations, config.merge_bound, args.centralized)
        cells.extend(seed_sweep(base, args.runs, args.seed))
    try:
        outcomes = bench_planner(cells)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_planner_csv(args.out, outcomes)
    summary = summarize_planner(outcomes)
    _say(format_planner_summary(summary))
    if args.plot:
        _plot_success(summary, args.plot)
        _say(f"wrote {args.plot}")
    return EXIT_OK


def cmd_plot(args) -> int:
    scenario = resolve_scenario(args)
    result = _load_result_for(args, scenario)
    plot_plan(result, scenario, args.out, every=args.every)
    _say(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "mc-validate": cmd_mc_validate,
    "bench-checkers": cmd_bench_checkers,
    "bench-planner": cmd_bench_planner,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _say(f"cckcbs {args.command}: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
