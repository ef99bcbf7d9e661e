import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cckcbs.cbs import SearchConfig, cc_kcbs
from cckcbs.chance import CheckerConfig
from cckcbs.geometry import Body, Polytope
from cckcbs.scenario import (
    GENERATORS,
    Environment,
    PlanResult,
    RobotSpec,
    Scenario,
    ScenarioError,
    dumps_result,
    dumps_scenario,
    env8,
    env32obs,
    load_result,
    load_scenario,
    loads_scenario,
    plot_plan,
    robot_models,
    save_result,
    save_scenario,
    scenario_to_dict,
)

MINIMAL = {
    "schema_version": 1,
    "dt": 1.0,
    "p_safe": 0.9,
    "environment": {"bounds": [0, 0, 8, 8], "obstacles": [{"vertices": [[3, 3], [4, 3], [4, 4], [3, 4]]}]},
    "robots": [
        {
            "name": "solo",
            "dynamics": "linear2d",
            "body": [[-0.125, -0.125], [0.125, -0.125], [0.125, 0.125], [-0.125, 0.125]],
            "start_mean": [1, 1],
            "start_cov": [[0.01, 0], [0, 0.01]],
            "goal_center": [7, 7],
            "goal_radius": 0.5,
        }
    ],
}


def test_minimal_file_round_trip(tmp_path):
    path = tmp_path / "solo.json"
    path.write_text(json.dumps(MINIMAL))
    scen = load_scenario(path)
    assert scen.robots[0].control_limit == 0.4
    save_scenario(tmp_path / "again.json", scen)
    text = (tmp_path / "again.json").read_text()
    assert load_scenario(tmp_path / "again.json") == scen
    assert dumps_scenario(loads_scenario(text)) == text


def broken(path, value):
    doc = json.loads(json.dumps(MINIMAL))
    node = doc
    for key in path[:-1]:
        node = node[key]
    if value is None:
        del node[path[-1]]
    else:
        node[path[-1]] = value
    return json.dumps(doc)


@pytest.mark.parametrize(
    "path, value, message",
    [
        (("robots", 0, "dynamics"), "hovercraft", "unknown model 'hovercraft'"),
        (("robots", 0, "goal_radius"), None, "robots[0].goal_radius: required field missing"),
        (("robots", 0, "start_mean"), [1, 2, 3], "robots[0].start_mean"),
        (("robots", 0, "start_cov"), [[1, 2], [2, 1]], "robots[0].start_cov"),
        (("robots", 0, "start_mean"), [9, 1], "start lies outside the workspace"),
        (("robots", 0, "goal_center"), [7.8, 7], "goal disk leaves the workspace"),
        (("p_safe",), 0.4, "p_safe"),
        (("environment", "bounds"), [0, 0, 0, 8], "environment.bounds"),
        (("environment", "obstacles"), [{"vertices": [[7, 7], [9, 7], [9, 9]]}], "environment.obstacles[0]"),
        (("schema_version",), 7, "schema_version"),
        (("robots",), [], "robots"),
        (("robots", 0, "goal_radius"), "wide", "robots[0].goal_radius: expected a number"),
    ],
)
def test_diagnostics_name_the_field(path, value, message):
    with pytest.raises(ScenarioError) as info:
        loads_scenario(broken(path, value))
    assert message in str(info.value)


def test_parse_error_reports_line():
    text = json.dumps(MINIMAL, indent=1).replace('"dt": 1.0,', '"dt": 1.0,,')
    with pytest.raises(ScenarioError, match=r"line \d+ column \d+"):
        loads_scenario(text)


def test_duplicate_names_rejected():
    doc = json.loads(json.dumps(MINIMAL))
    doc["robots"].append(dict(doc["robots"][0]))
    with pytest.raises(ScenarioError, match="unique"):
        loads_scenario(json.dumps(doc))


@st.composite
def scenarios(draw):
    size = draw(st.floats(4, 40))
    n_obs = draw(st.integers(0, 4))
    obstacles = []
    for _ in range(n_obs):
        x = draw(st.floats(0, size - 1))
        y = draw(st.floats(0, size - 1))
        side = draw(st.floats(0.1, 1))
        obstacles.append(Polytope.box(x, y, x + side, y + side))
    robots = []
    for i in range(draw(st.integers(1, 4))):
        dyn = draw(st.sampled_from(["linear2d", "unicycle"]))
        dim = 2 if dyn == "linear2d" else 4
        mean = [draw(st.floats(0, size)), draw(st.floats(0, size))] + [0.0] * (dim - 2)
        scale = draw(st.floats(1e-4, 0.1))
        radius = draw(st.floats(0.1, 1.0))
        goal = [draw(st.floats(radius, size - radius)), draw(st.floats(radius, size - radius))]
        width = draw(st.floats(0.05, 0.5))
        robots.append(
            RobotSpec(f"r{i}", dyn, Body.square(width), np.array(mean), scale * np.eye(dim), np.array(goal), radius,
                      noise_q=draw(st.floats(0, 0.5)), noise_r=draw(st.floats(0.01, 0.5)))
        )
    return Scenario(Environment((0.0, 0.0, size, size), tuple(obstacles)), tuple(robots),
                    dt=draw(st.sampled_from([0.5, 1.0])), p_safe=draw(st.floats(0.51, 0.99)),
                    defaults={"checker": draw(st.sampled_from(["m1", "m21", "m22"]))})


@settings(max_examples=100, deadline=None)
@given(scenarios())
def test_random_round_trip(scen):
    text = dumps_scenario(scen)
    again = loads_scenario(text)
    assert again == scen
    assert dumps_scenario(again) == text


def test_env8_builds_linear_systems():
    scen = env8(4)
    assert scen.environment.bounds == (0.0, 0.0, 8.0, 8.0) and scen.p_safe == 0.9
    models = robot_models(scen)
    assert len(models) == 4 and all(m.system.n == 2 and m.system.p == 2 for m in models)
    assert np.array_equal(models[0].system.A, np.eye(2))


def test_generators_reproducible():
    a = env32obs(8, seed=5)
    b = env32obs(8, seed=5)
    c = env32obs(8, seed=6)
    assert a == b and a != c
    assert len(a.environment.obstacles) == 50
    assert a.environment.bounds == (0.0, 0.0, 32.0, 32.0)
    for name, gen in GENERATORS.items():
        assert dumps_scenario(gen(2)) == dumps_scenario(gen(2)), name


def test_generator_keeps_starts_and_goals_clear():
    scen = env32obs(8, seed=2)
    for robot in scen.robots:
        for obs in scen.environment.obstacles:
            assert obs.distance_to_point(robot.goal_center) > robot.goal_radius
            assert not obs.contains(robot.start_mean[:2])


@pytest.fixture(scope="module")
def solved():
    scen = env8(2)
    result = cc_kcbs(scen, SearchConfig(CheckerConfig("m22", grid_divisions=5, p_safe=0.9)))
    assert result.success
    return scen, result


def test_result_round_trip(tmp_path, solved):
    _, result = solved
    save_result(tmp_path / "r.json", result)
    again = load_result(tmp_path / "r.json")
    assert again == result
    assert dumps_result(again) == dumps_result(result)
    assert "wall_time_s" not in result.metrics


def test_result_status_invariant():
    with pytest.raises(ValueError):
        PlanResult("success", (), {}, {})
    with pytest.raises(ValueError):
        PlanResult("maybe", (), {}, {})


def test_plot_is_deterministic(tmp_path, solved):
    scen, result = solved
    plot_plan(result, scen, tmp_path / "a.svg")
    plot_plan(result, scen, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.startswith(b"<?xml") and b"<svg" in a


def test_schema_is_plain_json():
    doc = scenario_to_dict(env8(2))
    assert json.loads(json.dumps(doc)) == doc
    assert doc["schema_version"] == 1
