"""Problem definitions, JSON persistence, benchmark environment generators and plan plots."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .chance import GoalRegion
from .dynamics import LinearSystem, MotionPlan, make_linear2d_system, make_unicycle_system
from .gaussian import GaussianBelief, chi2_quantile, check_covariance
from .geometry import Body, GeometryError, Polytope
from .lowlevel import RobotModel

SCHEMA_VERSION = 1
DYNAMICS = ("linear2d", "unicycle")


class ScenarioError(ValueError):
    """Malformed scenario or result document; the message names the offending field."""


@dataclass(frozen=True, eq=False)
class Environment:
    bounds: tuple[float, float, float, float]
    obstacles: tuple[Polytope, ...] = ()

    def __post_init__(self):
        xmin, ymin, xmax, ymax = (float(b) for b in self.bounds)
        if not (xmax > xmin and ymax > ymin):
            raise ScenarioError("environment.bounds: workspace must have positive extent")
        object.__setattr__(self, "bounds", (xmin, ymin, xmax, ymax))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        for i, obs in enumerate(self.obstacles):
            x0, y0, x1, y1 = obs.bounds()
            if x0 < xmin - 1e-9 or y0 < ymin - 1e-9 or x1 > xmax + 1e-9 or y1 > ymax + 1e-9:
                raise ScenarioError(f"environment.obstacles[{i}]: obstacle leaves the workspace bounds")

    @property
    def area(self) -> float:
        xmin, ymin, xmax, ymax = self.bounds
        return (xmax - xmin) * (ymax - ymin)

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return self.bounds == other.bounds and self.obstacles == other.obstacles


@dataclass(frozen=True, eq=False)
class RobotSpec:
    """One robot. ``start_mean``/``start_cov`` live in the planning state space:
    (x, y) for linear2d and (x, y, vx, vy) for the linearized unicycle."""

    name: str
    dynamics: str
    body: Body
    start_mean: np.ndarray
    start_cov: np.ndarray
    goal_center: np.ndarray
    goal_radius: float
    noise_q: float = 0.1
    noise_r: float = 0.1
    control_limit: float | None = None
    speed_limit: float | None = None

    def __post_init__(self):
        if self.dynamics not in DYNAMICS:
            raise ScenarioError(f"dynamics: unknown model {self.dynamics!r} (expected one of {', '.join(DYNAMICS)})")
        dim = 2 if self.dynamics == "linear2d" else 4
        mean = np.array(self.start_mean, dtype=float).reshape(-1)
        cov = np.array(self.start_cov, dtype=float)
        if mean.shape != (dim,):
            raise ScenarioError(f"start_mean: expected {dim} entries for {self.dynamics}, got {mean.size}")
        try:
            check_covariance(cov, dim)
        except ValueError as exc:
            raise ScenarioError(f"start_cov: {exc}") from None
        goal = np.array(self.goal_center, dtype=float).reshape(-1)
        if goal.shape != (2,):
            raise ScenarioError("goal_center: expected 2 entries")
        if not self.goal_radius > 0:
            raise ScenarioError("goal_radius: must be positive")
        for arr in (mean, cov, goal):
            arr.setflags(write=False)
        object.__setattr__(self, "start_mean", mean)
        object.__setattr__(self, "start_cov", cov)
        object.__setattr__(self, "goal_center", goal)
        object.__setattr__(self, "goal_radius", float(self.goal_radius))
        if self.control_limit is None:
            object.__setattr__(self, "control_limit", 0.4 if self.dynamics == "linear2d" else 1.0)
        if self.speed_limit is None and self.dynamics == "unicycle":
            object.__setattr__(self, "speed_limit", 1.0)

    @property
    def state_dim(self) -> int:
        return 2 if self.dynamics == "linear2d" else 4

    def __eq__(self, other):
        if not isinstance(other, RobotSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.dynamics == other.dynamics
            and self.body == other.body
            and np.array_equal(self.start_mean, other.start_mean)
            and np.array_equal(self.start_cov, other.start_cov)
            and np.array_equal(self.goal_center, other.goal_center)
            and self.goal_radius == other.goal_radius
            and self.noise_q == other.noise_q
            and self.noise_r == other.noise_r
            and self.control_limit == other.control_limit
            and self.speed_limit == other.speed_limit
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    environment: Environment
    robots: tuple[RobotSpec, ...]
    dt: float = 1.0
    p_safe: float = 0.9
    defaults: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "robots", tuple(self.robots))
        if not self.robots:
            raise ScenarioError("robots: need at least one robot")
        if not (0.5 < self.p_safe < 1.0):
            raise ScenarioError("p_safe: must lie in (0.5, 1)")
        if not self.dt > 0:
            raise ScenarioError("dt: must be positive")
        names = [r.name for r in self.robots]
        if len(set(names)) != len(names):
            raise ScenarioError("robots: names must be unique")
        xmin, ymin, xmax, ymax = self.environment.bounds
        for i, r in enumerate(self.robots):
            x, y = r.start_mean[:2]
            if not (xmin <= x <= xmax and ymin <= y <= ymax):
                raise ScenarioError(f"robots[{i}].start_mean: start lies outside the workspace")
            gx, gy = r.goal_center
            g = r.goal_radius
            if gx - g < xmin or gx + g > xmax or gy - g < ymin or gy + g > ymax:
                raise ScenarioError(f"robots[{i}].goal_center: goal disk leaves the workspace")

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.environment == other.environment
            and self.robots == other.robots
            and self.dt == other.dt
            and self.p_safe == other.p_safe
            and self.defaults == other.defaults
        )

    def subset(self, count: int) -> "Scenario":
        return Scenario(self.environment, self.robots[:count], self.dt, self.p_safe, dict(self.defaults))


# ---------------------------------------------------------------------------
# Conversion to planner models
# ---------------------------------------------------------------------------


def robot_system(spec: RobotSpec, dt: float) -> LinearSystem:
    if spec.dynamics == "linear2d":
        return make_linear2d_system(spec.noise_q, spec.noise_r, dt=dt)
    return make_unicycle_system(dt, spec.noise_q, spec.noise_r)[0]


def robot_model(spec: RobotSpec, env: Environment, dt: float) -> RobotModel:
    sys = robot_system(spec, dt)
    xmin, ymin, xmax, ymax = env.bounds
    u = spec.control_limit
    if spec.dynamics == "linear2d":
        lo, hi = [xmin, ymin], [xmax, ymax]
    else:
        v = spec.speed_limit
        lo, hi = [xmin, ymin, -v, -v], [xmax, ymax, v, v]
    return RobotModel(
        spec.name,
        sys,
        spec.body,
        GaussianBelief(spec.start_mean, spec.start_cov),
        GoalRegion(spec.goal_center, spec.goal_radius),
        np.full(sys.p, -u),
        np.full(sys.p, u),
        np.array(lo, dtype=float),
        np.array(hi, dtype=float),
    )


def robot_models(scenario: Scenario) -> list[RobotModel]:
    return [robot_model(r, scenario.environment, scenario.dt) for r in scenario.robots]


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RobotPlanRecord:
    name: str
    controls: np.ndarray  # (T, p)
    states: np.ndarray  # (T+1, n)
    position_cov: np.ndarray  # (T+1, 2, 2)

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        p = np.shape(self.controls)[-1] if np.ndim(self.controls) == 2 else 1
        controls = np.array(self.controls, dtype=float).reshape(-1, p)
        covs = np.array(self.position_cov, dtype=float).reshape(-1, 2, 2)
        if len(states) != len(controls) + 1 or len(covs) != len(states):
            raise ScenarioError(f"plans[{self.name}]: inconsistent step counts")
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "position_cov", covs)

    @classmethod
    def from_plan(cls, name: str, plan: MotionPlan, position_indices) -> "RobotPlanRecord":
        idx = list(position_indices)
        covs = np.array([b.gamma[np.ix_(idx, idx)] for b in plan.beliefs])
        return cls(name, plan.controls, plan.nominal_states, covs)

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def __eq__(self, other):
        if not isinstance(other, RobotPlanRecord):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.controls, other.controls)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.position_cov, other.position_cov)
        )


STATUSES = ("success", "timeout", "infeasible")


@dataclass(frozen=True, eq=False)
class PlanResult:
    status: str
    plans: tuple[RobotPlanRecord, ...] = ()
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ScenarioError(f"status: unknown value {self.status!r}")
        object.__setattr__(self, "plans", tuple(self.plans))
        if self.status == "success" and not self.plans:
            raise ScenarioError("plans: a successful result needs a plan per robot")

    @property
    def success(self) -> bool:
        return self.status == "success"

    def __eq__(self, other):
        if not isinstance(other, PlanResult):
            return NotImplemented
        return (
            self.status == other.status
            and self.plans == other.plans
            and self.metrics == other.metrics
            and self.config == other.config
        )


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------


def _tolist(a) -> Any:
    return np.asarray(a, dtype=float).tolist()


def scenario_to_dict(s: Scenario) -> dict:
    robots = []
    for r in s.robots:
        entry = {
            "name": r.name,
            "dynamics": r.dynamics,
            "body": _tolist(r.body.vertices),
            "start_mean": _tolist(r.start_mean),
            "start_cov": _tolist(r.start_cov),
            "goal_center": _tolist(r.goal_center),
            "goal_radius": r.goal_radius,
            "noise": {"q": r.noise_q, "r": r.noise_r},
            "control_limit": r.control_limit,
        }
        if r.speed_limit is not None:
            entry["speed_limit"] = r.speed_limit
        robots.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "dt": s.dt,
        "p_safe": s.p_safe,
        "environment": {
            "bounds": list(s.environment.bounds),
            "obstacles": [
                {"normals": _tolist(o.normals), "offsets": _tolist(o.offsets)} for o in s.environment.obstacles
            ],
        },
        "robots": robots,
        "defaults": dict(s.defaults),
    }


class _Fields:
    """Field access that reports the full path of anything missing or mistyped."""

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ScenarioError(f"{path or 'document'}: expected an object")
        self.data = data
        self.path = path

    def _name(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, kind=None, default=...):
        if key not in self.data:
            if default is ...:
                raise ScenarioError(f"{self._name(key)}: required field missing")
            return default
        value = self.data[key]
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ScenarioError(f"{self._name(key)}: expected a number")
            return float(value)
        if kind is not None and not isinstance(value, kind):
            raise ScenarioError(f"{self._name(key)}: expected {kind.__name__}")
        return value

    def array(self, key, default=...):
        value = self.get(key, default=default)
        if value is default and default is not ...:
            return default
        try:
            arr = np.array(value, dtype=float)
        except (TypeError, ValueError):
            raise ScenarioError(f"{self._name(key)}: expected a numeric array") from None
        return arr

    def sub(self, key) -> "_Fields":
        return _Fields(self.get(key, dict), self._name(key))


def scenario_from_dict(doc: dict) -> Scenario:
    f = _Fields(doc, "")
    version = f.get("schema_version", int)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version: unsupported version {version}")
    env_f = f.sub("environment")
    bounds = env_f.array("bounds")
    if bounds.shape != (4,):
        raise ScenarioError("environment.bounds: expected [xmin, ymin, xmax, ymax]")
    obstacles = []
    for i, item in enumerate(env_f.get("obstacles", list, [])):
        of = _Fields(item, f"environment.obstacles[{i}]")
        try:
            if "vertices" in item:
                obstacles.append(Polytope.from_vertices(of.array("vertices")))
            else:
                obstacles.append(Polytope(of.array("normals"), of.array("offsets")))
        except GeometryError as exc:
            raise ScenarioError(f"environment.obstacles[{i}]: {exc}") from None
    env = Environment(tuple(bounds), tuple(obstacles))
    robots = []
    for i, item in enumerate(f.get("robots", list)):
        rf = _Fields(item, f"robots[{i}]")
        noise = _Fields(rf.get("noise", dict, {}), f"robots[{i}].noise")
        try:
            body = Body(rf.array("body"))
        except GeometryError as exc:
            raise ScenarioError(f"robots[{i}].body: {exc}") from None
        try:
            robots.append(
                RobotSpec(
                    name=rf.get("name", str),
                    dynamics=rf.get("dynamics", str),
                    body=body,
                    start_mean=rf.array("start_mean"),
                    start_cov=rf.array("start_cov"),
                    goal_center=rf.array("goal_center"),
                    goal_radius=rf.get("goal_radius", float),
                    noise_q=noise.get("q", float, 0.1),
                    noise_r=noise.get("r", float, 0.1),
                    control_limit=rf.get("control_limit", float, None),
                    speed_limit=rf.get("speed_limit", float, None),
                )
            )
        except ScenarioError as exc:
            raise ScenarioError(f"robots[{i}].{exc}") from None
    return Scenario(
        env,
        tuple(robots),
        dt=f.get("dt", float, 1.0),
        p_safe=f.get("p_safe", float, 0.9),
        defaults=dict(f.get("defaults", dict, {})),
    )


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=1) + "\n"


def loads_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(doc)


def load_scenario(path) -> Scenario:
    return loads_scenario(Path(path).read_text())


def save_scenario(path, scenario: Scenario) -> None:
    Path(path).write_text(dumps_scenario(scenario))


def result_to_dict(result: PlanResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "status": result.status,
        "config": result.config,
        "metrics": result.metrics,
        "plans": [
            {
                "name": p.name,
                "controls": _tolist(p.controls),
                "states": _tolist(p.states),
                "position_cov": _tolist(p.position_cov),
            }
            for p in result.plans
        ],
    }


def result_from_dict(doc: dict) -> PlanResult:
    f = _Fields(doc, "")
    if f.get("schema_version", int) != SCHEMA_VERSION:
        raise ScenarioError("schema_version: unsupported version")
    plans = []
    for i, item in enumerate(f.get("plans", list, [])):
        pf = _Fields(item, f"plans[{i}]")
        controls = pf.array("controls")
        if controls.size == 0:
            controls = controls.reshape(0, 0)
        plans.append(RobotPlanRecord(pf.get("name", str), controls, pf.array("states"), pf.array("position_cov")))
    return PlanResult(f.get("status", str), tuple(plans), dict(f.get("metrics", dict, {})), dict(f.get("config", dict, {})))


def dumps_result(result: PlanResult) -> str:
    return json.dumps(result_to_dict(result), indent=1) + "\n"


def save_result(path, result: PlanResult) -> None:
    Path(path).write_text(dumps_result(result))


def load_result(path) -> PlanResult:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return result_from_dict(doc)


# ---------------------------------------------------------------------------
# Benchmark environments
# ---------------------------------------------------------------------------

ROBOT_WIDTH = 0.25
START_COV = 0.01
GOAL_RADIUS = 0.5


def _env8_layout():
    # (start, goal) pairs; robots 2k and 2k+1 start far apart, later robots
    # start 0.74 from an earlier one so that formations are tight.
    near, far, gap = 0.8, 7.2, 0.74
    starts = [
        (near, near), (far, far), (near + gap, near), (far - gap, far),
        (far, near), (near, far), (far - gap, near), (near + gap, far),
    ]
    # each corner group moves a quarter turn counter-clockwise around the centre
    goals = [(8.0 - y, x) for x, y in starts]
    return starts, goals


def env8(n_robots: int = 4, dynamics: str = "linear2d", p_safe: float = 0.9) -> Scenario:
    """8x8 workspace with four pillars; each corner group moves a quarter turn around the centre."""
    if not 1 <= n_robots <= 8:
        raise ValueError("env8 holds 1 to 8 robots")
    pillars = [(2.5, 2.5), (5.5, 2.5), (2.5, 5.5), (5.5, 5.5)]
    obstacles = tuple(Polytope.box(x - 0.5, y - 0.5, x + 0.5, y + 0.5) for x, y in pillars)
    env = Environment((0.0, 0.0, 8.0, 8.0), obstacles)
    starts, goals = _env8_layout()
    dt = 1.0 if dynamics == "linear2d" else 0.5
    robots = [
        _make_robot(f"r{i}", dynamics, starts[i], goals[i])
        for i in range(n_robots)
    ]
    return Scenario(env, tuple(robots), dt=dt, p_safe=p_safe)


def open8(n_robots: int = 2, dynamics: str = "linear2d", p_safe: float = 0.9) -> Scenario:
    """Obstacle-free 8x8 workspace, same start/goal layout as :func:`env8`."""
    s = env8(n_robots, dynamics, p_safe)
    return Scenario(Environment(s.environment.bounds), s.robots, s.dt, s.p_safe)


def _make_robot(name, dynamics, start, goal) -> RobotSpec:
    dim = 2 if dynamics == "linear2d" else 4
    mean = list(start) + [0.0] * (dim - 2)
    return RobotSpec(
        name=name,
        dynamics=dynamics,
        body=Body.square(ROBOT_WIDTH),
        start_mean=np.array(mean),
        start_cov=START_COV * np.eye(dim),
        goal_center=np.array(goal, dtype=float),
        goal_radius=GOAL_RADIUS,
    )


def _perimeter_layout(n: int, size: float, rng: np.random.Generator):
    margin = 1.5
    starts, goals = [], []
    for i in range(n):
        t = (i + 0.5) / n
        angle = 2.0 * math.pi * t
        cx = size / 2 + (size / 2 - margin) * math.cos(angle)
        cy = size / 2 + (size / 2 - margin) * math.sin(angle)
        starts.append((cx, cy))
        goals.append((size - cx, size - cy))
    return starts, goals


def env32(n_robots: int = 8, dynamics: str = "linear2d", p_safe: float = 0.9, seed: int = 0) -> Scenario:
    """Open 32x32 workspace; robots start on a ring and cross to the antipodal point."""
    rng = np.random.default_rng(seed)
    starts, goals = _perimeter_layout(n_robots, 32.0, rng)
    robots = [_make_robot(f"r{i}", dynamics, starts[i], goals[i]) for i in range(n_robots)]
    dt = 1.0 if dynamics == "linear2d" else 0.5
    return Scenario(Environment((0.0, 0.0, 32.0, 32.0)), tuple(robots), dt=dt, p_safe=p_safe)


def env32obs(
    n_robots: int = 8,
    dynamics: str = "linear2d",
    p_safe: float = 0.9,
    seed: int = 0,
    n_obstacles: int = 50,
    side_range: tuple[float, float] = (0.5, 2.0),
) -> Scenario:
    """32x32 workspace with ``n_obstacles`` random axis-aligned squares.

    Squares overlapping a start contour disk or a goal disk (plus body radius)
    are rejected and redrawn, so the set is reproducible from ``seed``.
    """
    base = env32(n_robots, dynamics, p_safe, seed)
    rng = np.random.default_rng(seed)
    keep_out = []
    t_chi = chi2_quantile(p_safe, 2)
    for r in base.robots:
        reach = math.sqrt(t_chi * float(np.max(np.linalg.eigvalsh(r.start_cov[:2, :2])))) + r.body.radius_bound
        keep_out.append((r.start_mean[:2], reach + 0.25))
        keep_out.append((r.goal_center, r.goal_radius + r.body.radius_bound))
    obstacles: list[Polytope] = []
    attempts = 0
    while len(obstacles) < n_obstacles:
        attempts += 1
        if attempts > 100 * n_obstacles:
            raise RuntimeError("could not place the requested number of obstacles")
        side = float(rng.uniform(*side_range))
        x = float(rng.uniform(0.0, 32.0 - side))
        y = float(rng.uniform(0.0, 32.0 - side))
        box = Polytope.box(x, y, x + side, y + side)
        if any(box.distance_to_point(c) <= rad for c, rad in keep_out):
            continue
        obstacles.append(box)
    env = Environment(base.environment.bounds, tuple(obstacles))
    return Scenario(env, base.robots, base.dt, base.p_safe)


GENERATORS = {"env8": env8, "open8": open8, "env32": env32, "env32obs": env32obs}


# ---------------------------------------------------------------------------
# Plotting
# ---------------------------------------------------------------------------


def _ellipse_points(mean, cov, t_chi, n=40):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    axes = np.sqrt(t_chi * np.clip(vals, 0.0, None))
    ang = np.linspace(0.0, 2.0 * math.pi, n + 1)
    circle = np.column_stack([np.cos(ang) * axes[0], np.sin(ang) * axes[1]])
    return circle @ vecs.T + mean


def plot_plan(result: PlanResult, scenario: Scenario, path, every: int = 5) -> None:
    """Write an SVG with obstacles, goal disks, nominal paths and p_safe contour ellipses."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle, Polygon

    matplotlib.rcParams["svg.hashsalt"] = "cckcbs"
    matplotlib.rcParams["svg.fonttype"] = "none"
    t_chi = chi2_quantile(scenario.p_safe, 2)
    fig, ax = plt.subplots(figsize=(6, 6))
    xmin, ymin, xmax, ymax = scenario.environment.bounds
    for obs in scenario.environment.obstacles:
        ax.add_patch(Polygon(obs.vertices(), closed=True, facecolor="0.35", edgecolor="0.1"))
    colors = plt.get_cmap("tab10")
    for i, robot in enumerate(scenario.robots):
        c = colors(i % 10)
        ax.add_patch(Circle(tuple(robot.goal_center), robot.goal_radius, fill=False, linestyle="--", edgecolor=c))
        ax.plot(*robot.start_mean[:2], marker="o", color=c, markersize=4)
    by_name = {p.name: p for p in result.plans}
    for i, robot in enumerate(scenario.robots):
        rec = by_name.get(robot.name)
        if rec is None:
            continue
        c = colors(i % 10)
        ax.plot(rec.states[:, 0], rec.states[:, 1], color=c, linewidth=1.2)
        steps = list(range(0, rec.horizon + 1, every))
        if steps[-1] != rec.horizon:
            steps.append(rec.horizon)
        for k in steps:
            pts = _ellipse_points(rec.states[k, :2], rec.position_cov[k], t_chi)
            ax.plot(pts[:, 0], pts[:, 1], color=c, linewidth=0.6)
    ax.set_xlim(xmin, xmax)
    ax.set_ylim(ymin, ymax)
    ax.set_aspect("equal")
    ax.set_title(f"status: {result.status}")
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    Path(path).write_text(buf.getvalue())
