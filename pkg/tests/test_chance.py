import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cckcbs.chance import (
    CheckerConfig,
    DegenerateDistanceError,
    GoalRegion,
    Method,
    ObstacleMode,
    align_grid,
    allocate_adaptive,
    allocate_equal,
    body_radius,
    collision_polytope,
    contour_radius,
    difference_belief,
    goal_check,
    grid_cover_mass,
    m1_check,
    m21_check,
    m21_separating_halfplane,
    m22_check,
    m22_probability,
    mc_collision_probability,
    nearest_direction,
    split_agent_obstacle,
    static_obstacle_check,
)
from cckcbs.gaussian import DegenerateCovarianceError, GaussianBelief, WorkspaceMarginal, whiten
from cckcbs.geometry import Body, Polytope
from cckcbs.lowlevel import PairChecker

SQUARE = Body.square(0.25)
OCTAGON = collision_polytope(SQUARE, SQUARE, 8)


def marginal(mean, cov):
    return WorkspaceMarginal(np.asarray(mean, dtype=float), np.asarray(cov, dtype=float))


def random_pair(rng, box=5.0, lo=0.001, hi=0.05):
    def spd():
        q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        return q @ np.diag(rng.uniform(lo, hi, 2)) @ q.T

    return marginal(rng.uniform(0, box, 2), spd()), marginal(rng.uniform(0, box, 2), spd())


# radii and contours ----------------------------------------------------------------


def test_body_radius_examples():
    assert body_radius(Body.square(1.0)) == pytest.approx(0.7071068, abs=1e-7)
    assert body_radius(SQUARE) == pytest.approx(0.1767767, abs=1e-7)
    assert body_radius(np.array([[0.0, 0.0], [1.0, 0.0]])) == pytest.approx(0.5)


def test_contour_examples():
    assert contour_radius(marginal([0, 0], np.zeros((2, 2))), 0.95) == 0.0
    assert contour_radius(marginal([0, 0], 0.01 * np.eye(2)), 0.95) == pytest.approx(0.2447747, abs=1e-7)
    assert contour_radius(marginal([0, 0], np.diag([0.04, 0.01])), 0.95) == pytest.approx(0.4895494, abs=1e-7)


def test_contour_holds_p_safe_mass():
    # the disk of radius r must hold at least p_safe of the mass
    rng = np.random.default_rng(2)
    cov = np.array([[0.04, 0.01], [0.01, 0.02]])
    r = contour_radius(marginal([0, 0], cov), 0.9)
    x = rng.multivariate_normal([0, 0], cov, size=200_000)
    assert np.mean(np.hypot(x[:, 0], x[:, 1]) <= r) >= 0.9


# M1 ----------------------------------------------------------------------------------


def test_m1_examples():
    b = marginal([0, 0], 0.01 * np.eye(2))
    assert not m1_check(b, SQUARE, b, SQUARE, 0.95)
    assert m1_check(b, SQUARE, marginal([1.0, 0], 0.01 * np.eye(2)), SQUARE, 0.95)
    assert not m1_check(b, SQUARE, marginal([0.8, 0], 0.01 * np.eye(2)), SQUARE, 0.95)


# difference belief and polytope --------------------------------------------------------


def test_difference_examples():
    b = marginal([1, 2], 0.02 * np.eye(2))
    d = difference_belief(b, b)
    assert np.array_equal(d.mean, [0, 0]) and np.allclose(d.cov, 0.04 * np.eye(2))
    d = difference_belief(marginal([3, 0], 0.01 * np.eye(2)), marginal([1, 0], 0.03 * np.eye(2)))
    assert np.allclose(d.mean, [2, 0]) and np.allclose(d.cov, 0.04 * np.eye(2))


def test_difference_matches_samples():
    rng = np.random.default_rng(4)
    ci = np.array([[0.02, 0.005], [0.005, 0.01]])
    cj = np.array([[0.03, -0.01], [-0.01, 0.04]])
    n = 100_000
    xs = rng.multivariate_normal([0, 0], ci, n) - rng.multivariate_normal([0, 0], cj, n)
    target = difference_belief(marginal([0, 0], ci), marginal([0, 0], cj)).cov
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
    assert np.all(np.abs(np.cov(xs.T) - target) < 3 * se)


def test_collision_polytope_examples():
    unit = Body(np.array([[-0.5, 0.0], [0.0, -0.5], [0.5, 0.0], [0.0, 0.5]]))
    assert unit.radius_bound == pytest.approx(0.5)
    sq = collision_polytope(unit, unit, 4)
    assert np.allclose(sq.offsets, 1.0)
    assert np.allclose(np.abs(sq.normals).max(axis=1), 1.0)
    oct_ = OCTAGON
    assert np.allclose(oct_.offsets, 0.3535534, atol=1e-7)
    assert np.max(np.linalg.norm(oct_.vertices(), axis=1)) == pytest.approx(0.3826834, abs=1e-7)
    ang = np.random.default_rng(0).uniform(0, 2 * math.pi, 10_000)
    pts = 2 * SQUARE.radius_bound * np.column_stack([np.cos(ang), np.sin(ang)])
    assert np.all(pts @ oct_.normals.T <= oct_.offsets + 1e-12)
    with pytest.raises(ValueError):
        collision_polytope(SQUARE, SQUARE, 3)


# M2.1 -----------------------------------------------------------------------------------


def test_m21_examples():
    cov = 0.01 * np.eye(2)
    assert not m21_check(marginal([0, 0], cov), OCTAGON, 0.05)
    assert m21_check(marginal([3, 0], cov), OCTAGON, 0.05)
    assert not m21_check(marginal([0.45, 0], cov), OCTAGON, 0.05)
    # the threshold along x is the inradius plus sqrt(2)*0.1*erfinv(0.9)
    edge = 0.3535534 + math.sqrt(2) * 0.1 * 1.163087
    assert edge == pytest.approx(0.5180385, abs=1e-6)
    assert m21_check(marginal([edge + 1e-6, 0], cov), OCTAGON, 0.05)
    assert not m21_check(marginal([edge - 1e-4, 0], cov), OCTAGON, 0.05)


def test_m21_domain():
    for p_c in (0.5, 0.7, 0.0):
        with pytest.raises(ValueError):
            m21_check(marginal([3, 0], 0.01 * np.eye(2)), OCTAGON, p_c)


def test_m21_certificate_bounds_the_halfplane_mass():
    rng = np.random.default_rng(8)
    certified = 0
    for _ in range(2000):
        bi, bj = random_pair(rng, 1.5)
        diff = difference_belief(bi, bj)
        h = m21_separating_halfplane(diff, OCTAGON, 0.05)
        if h is None:
            continue
        certified += 1
        n, off = OCTAGON.normals[h], OCTAGON.offsets[h]
        # mass of {n.x <= off}, the side holding the polytope
        mass = stats.norm.cdf((off - n @ diff.mean) / math.sqrt(n @ diff.cov @ n))
        assert mass <= 0.05 + 1e-12
    assert certified > 100


# M2.2 -------------------------------------------------------------------------------------


def test_m22_far_away():
    p, verdict = m22_check(marginal([20, 0], 0.01 * np.eye(2)), OCTAGON, 0.05, 5)
    assert p < 1e-14 and verdict


def test_m22_single_cell_is_bbox():
    diff = marginal([0.6, 0.3], np.array([[0.05, 0.01], [0.01, 0.03]]))
    white, _ = whiten(diff, OCTAGON)
    xs, ys = align_grid(white.vertices()[:, 0], white.vertices()[:, 1])
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    box = (stats.norm.cdf(x1) - stats.norm.cdf(x0)) * (stats.norm.cdf(y1) - stats.norm.cdf(y0))
    assert m22_probability(diff, OCTAGON, 1) == pytest.approx(box, rel=1e-12)


def test_m22_rotation_preserves_mass():
    # any rotation of the whitened frame leaves the fine-grid limit unchanged
    diff = marginal([0.7, -0.2], np.array([[0.05, 0.01], [0.01, 0.03]]))
    white, _ = whiten(diff, OCTAGON)
    verts = white.vertices()
    plain = grid_cover_mass(verts[:, 0], verts[:, 1], 400)
    aligned = m22_probability(diff, OCTAGON, 400)
    assert aligned == pytest.approx(plain, rel=0.02)


def separating_axis_cover(normals, offsets, verts, d):
    """Independent grid cover: a cell counts unless some polygon edge or cell side separates them."""
    (xmin, ymin), (xmax, ymax) = verts.min(axis=0), verts.max(axis=0)
    gx = np.linspace(xmin, xmax, d + 1)
    gy = np.linspace(ymin, ymax, d + 1)
    col = stats.norm.cdf(gx[1:]) - stats.norm.cdf(gx[:-1])
    row = stats.norm.cdf(gy[1:]) - stats.norm.cdf(gy[:-1])
    x0, x1 = gx[:-1][:, None, None], gx[1:][:, None, None]
    y0, y1 = gy[:-1][None, :, None], gy[1:][None, :, None]
    nx, ny = normals[:, 0], normals[:, 1]
    cell_min = np.where(nx > 0, nx * x0, nx * x1) + np.where(ny > 0, ny * y0, ny * y1)
    cell_max = np.where(nx > 0, nx * x1, nx * x0) + np.where(ny > 0, ny * y1, ny * y0)
    poly_min = (verts @ normals.T).min(axis=0)
    separated = np.any((cell_min > offsets + 1e-12) | (cell_max < poly_min - 1e-12), axis=-1)
    return float((col[:, None] * row[None, :])[~separated].sum())


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-3, 3), st.floats(0.005, 0.2), st.floats(0.005, 0.2), st.floats(-0.9, 0.9),
    st.sampled_from([2, 3, 5, 10, 25, 50]), st.sampled_from([0.0, 0.3, 0.7]),
)
def test_column_sweep_matches_separating_axis_cover(mx, my, v1, v2, rho, d, turn):
    cov = np.array([[v1, rho * math.sqrt(v1 * v2)], [rho * math.sqrt(v1 * v2), v2]])
    white, _ = whiten(marginal([mx, my], cov), OCTAGON)
    verts = white.vertices()
    ca, sa = math.cos(turn), math.sin(turn)
    rot = np.array([[ca, -sa], [sa, ca]])
    verts, normals = verts @ rot.T, white.normals @ rot.T
    sweep = grid_cover_mass(verts[:, 0], verts[:, 1], d)
    assert sweep == pytest.approx(separating_axis_cover(normals, white.offsets, verts, d), rel=1e-9, abs=1e-15)


def test_column_sweep_on_axis_aligned_square():
    xs, ys = [0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0]
    box = (stats.norm.cdf(1) - 0.5) ** 2
    for d in (1, 2, 7, 50):
        assert grid_cover_mass(xs, ys, d) == pytest.approx(box, rel=1e-12)


def test_m22_degenerate():
    with pytest.raises(DegenerateCovarianceError):
        m22_check(marginal([1, 0], np.diag([0.01, 0.0])), OCTAGON, 0.05, 5)


# octagon mass of N((1,0), 0.09 I), from one-dimensional quadrature over x slices
OCTAGON_MASS = 0.00880708498665399


def test_m22_convergence_example():
    diff = marginal([1, 0], 0.09 * np.eye(2))
    rng = np.random.default_rng(0)
    mc = OCTAGON.contains_many(rng.multivariate_normal([1, 0], 0.09 * np.eye(2), size=1_000_000)).mean()
    assert abs(mc - OCTAGON_MASS) < 4 * math.sqrt(OCTAGON_MASS / 1e6)
    for d in (1, 5, 50, 200):
        assert m22_probability(diff, OCTAGON, d) >= OCTAGON_MASS
    # box cells along the boundary over-count by about 5% at d=50; d=200 is within 2%
    assert abs(m22_probability(diff, OCTAGON, 200) - OCTAGON_MASS) / OCTAGON_MASS < 0.02


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_grid_refinement_monotone(seed):
    rng = np.random.default_rng(seed)
    bi, bj = random_pair(rng, 1.0, 0.001, 0.1)
    diff = difference_belief(bi, bj)
    ps = [m22_probability(diff, OCTAGON, d) for d in (1, 2, 5, 10, 25, 50)]
    assert all(b <= a + 1e-15 for a, b in zip(ps, ps[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_m22_covers_m21(seed):
    # aligned grids make M2.2 no more conservative than M2.1 on any input
    rng = np.random.default_rng(seed)
    bi, bj = random_pair(rng, 1.5)
    diff = difference_belief(bi, bj)
    if m21_check(diff, OCTAGON, 0.05):
        assert m22_check(diff, OCTAGON, 0.05, 2)[1]


def test_nearest_direction():
    sq = Polytope.box(1, -1, 3, 1).vertices()
    assert nearest_direction(sq[:, 0].tolist(), sq[:, 1].tolist()) == pytest.approx((1.0, 0.0))
    sq = Polytope.box(-1, -1, 1, 1).vertices()
    assert nearest_direction(sq[:, 0].tolist(), sq[:, 1].tolist()) is None
    sq = Polytope.box(1, 1, 2, 2).vertices()
    u = nearest_direction(sq[:, 0].tolist(), sq[:, 1].tolist())
    assert u == pytest.approx((math.sqrt(0.5), math.sqrt(0.5)))


# Monte Carlo oracle ---------------------------------------------------------------------


def test_mc_examples():
    z = np.zeros((2, 2))
    assert mc_collision_probability(marginal([0, 0], z), SQUARE, marginal([0.1, 0], z), SQUARE, n=100)[0] == 1.0
    assert mc_collision_probability(marginal([0, 0], z), SQUARE, marginal([10, 0], z), SQUARE, n=100)[0] == 0.0
    a = mc_collision_probability(marginal([0, 0], 0.01 * np.eye(2)), SQUARE, marginal([0.3, 0], 0.01 * np.eye(2)), SQUARE,
                                 n=5000, seed=3)
    b = mc_collision_probability(marginal([0, 0], 0.01 * np.eye(2)), SQUARE, marginal([0.3, 0], 0.01 * np.eye(2)), SQUARE,
                                 n=5000, seed=3)
    assert a == b


def test_mc_heading_matches_rotated_square():
    # a 45-degree heading turns the square into a diamond; bodies touching corner to corner
    z = np.zeros((2, 2))
    gap = 0.125 + SQUARE.radius_bound + 0.01
    p_flat = mc_collision_probability(marginal([0, 0], z), SQUARE, marginal([gap, 0], z), SQUARE, n=10)[0]
    p_turn = mc_collision_probability(marginal([0, 0], z), SQUARE, marginal([gap - 0.02, 0], z), SQUARE, n=10,
                                      heading_j=(math.pi / 4, 0.0))[0]
    assert p_flat == 0.0 and p_turn == 1.0


def test_checkers_sound_on_worked_example():
    diff_mean = np.array([0.45, 0.0])
    bi = marginal(diff_mean, 0.005 * np.eye(2))
    bj = marginal([0, 0], 0.005 * np.eye(2))
    p, se = mc_collision_probability(bi, SQUARE, bj, SQUARE, n=100_000, seed=1)
    diff = difference_belief(bi, bj)
    for ok in (m21_check(diff, OCTAGON, 0.05), m22_check(diff, OCTAGON, 0.05, 10)[1]):
        assert not (ok and p > 0.05 + 3 * se)


def test_soundness_sampled():
    # lighter twin of the acceptance soundness run
    rng = np.random.default_rng(21)
    for pid in range(200):
        bi, bj = random_pair(rng)
        diff = difference_belief(bi, bj)
        verdicts = [m1_check(bi, SQUARE, bj, SQUARE, 0.95), m21_check(diff, OCTAGON, 0.05)]
        verdicts += [m22_check(diff, OCTAGON, 0.05, d)[1] for d in (2, 10)]
        if not any(verdicts):
            continue
        p, se = mc_collision_probability(bi, SQUARE, bj, SQUARE, n=20_000, seed=pid)
        assert p <= 0.05 + 3 * se


# static obstacles and goal -------------------------------------------------------------------


def test_static_obstacle_examples():
    cov = 0.01 * np.eye(2)
    box = Polytope.box(0, 0, 1, 1)
    for mode in ObstacleMode:
        assert static_obstacle_check(marginal([5, 5], cov), SQUARE, box, 0.05, mode, p_safe=0.95)
        assert not static_obstacle_check(marginal([0.5, 0.5], cov), SQUARE, box, 0.05, mode, p_safe=0.95)
    near = marginal([-0.42, 0.5], cov)
    assert not static_obstacle_check(near, SQUARE, box, 0.05, ObstacleMode.CONTOUR, p_safe=0.95)
    assert static_obstacle_check(marginal([-0.43, 0.5], cov), SQUARE, box, 0.05, ObstacleMode.CONTOUR, p_safe=0.95)


def test_goal_examples():
    assert goal_check(GaussianBelief([1, 1], np.zeros((2, 2))), GoalRegion([1, 1], 0.01), 0.95)
    assert goal_check(GaussianBelief([1, 1], 0.01 * np.eye(2)), GoalRegion([1, 1], 0.3), 0.95)
    assert not goal_check(GaussianBelief([1, 1], 0.01 * np.eye(2)), GoalRegion([1, 1], 0.2), 0.95)
    with pytest.raises(ValueError):
        GoalRegion([0, 0], 0.0)


# allocation ------------------------------------------------------------------------------------


def test_allocate_equal_examples():
    a = allocate_equal(0.1, 0, 2)
    assert a.share((0, 1)) == pytest.approx(0.1)
    b = allocate_equal(0.1, 50, 20)
    assert b.share((3, 7)) == pytest.approx(0.0014493, abs=1e-7)
    assert b.per_obstacle * 50 + b.share((0, 1)) * 19 == pytest.approx(0.1)
    solo = allocate_equal(0.1, 0, 1)
    assert solo.pairwise == {}


def test_allocate_adaptive_examples():
    a = allocate_adaptive(0.1, 1.0, 0.0, [2.0])
    assert a.p_c_obstacles == 0.0 and a.share(0) == pytest.approx(0.1)
    assert split_agent_obstacle(0.1, 2.0, 2.0) == pytest.approx((0.05, 0.05))
    b = allocate_adaptive(0.1, 0.6, 0.4, {1: 1.0, 2: 3.0})
    assert b.share(1) == pytest.approx(0.045) and b.share(2) == pytest.approx(0.015)
    with pytest.raises(DegenerateDistanceError):
        allocate_adaptive(0.1, 1.0, 1.0, [1.0, 0.0])


@given(
    st.floats(0.001, 0.5),
    st.floats(0.01, 100),
    st.floats(0, 100),
    st.lists(st.floats(0.01, 50), min_size=1, max_size=20),
)
def test_allocation_conservation(p_coll, va, vo, dists):
    a = allocate_adaptive(p_coll, va, vo, dists)
    p_agents = p_coll - a.p_c_obstacles
    assert sum(a.pairwise.values()) == pytest.approx(p_agents, abs=1e-9)
    assert a.p_c_obstacles + p_agents == pytest.approx(p_coll, abs=1e-9)
    order = np.argsort(dists)
    shares = [a.share(int(k)) for k in order]
    assert all(s2 <= s1 + 1e-15 for s1, s2 in zip(shares, shares[1:]))


# config and fast path ------------------------------------------------------------------------


def test_checker_config_validation():
    assert CheckerConfig("m22", grid_divisions=2).label == "M.2.2(2)"
    assert CheckerConfig("m1").method is Method.M1
    for bad in (dict(polytope_sides=3), dict(grid_divisions=0), dict(p_safe=1.0)):
        with pytest.raises(ValueError):
            CheckerConfig("m22", **bad)


@pytest.mark.parametrize("method", ["m1", "m21", "m22"])
def test_fast_pair_checker_agrees(method):
    cfg = CheckerConfig(method, grid_divisions=5, p_safe=0.9)
    fast = PairChecker(cfg)
    rng = np.random.default_rng(30)
    r = SQUARE.radius_bound
    for _ in range(3000):
        bi, bj = random_pair(rng, 1.5, 0.001, 0.1)
        ci = (bi.cov[0, 0], bi.cov[0, 1], bi.cov[1, 1])
        cj = (bj.cov[0, 0], bj.cov[0, 1], bj.cov[1, 1])
        got = fast.valid(tuple(bi.mean), ci, r, tuple(bj.mean), cj, r, 0.1)
        diff = difference_belief(bi, bj)
        if method == "m1":
            want = bool(m1_check(bi, SQUARE, bj, SQUARE, 0.9))
        elif method == "m21":
            want = bool(m21_check(diff, OCTAGON, 0.1))
        else:
            p = m22_probability(diff, OCTAGON, 5)
            if abs(p - 0.1) < 1e-9:
                continue
            want = p <= 0.1
        assert got == want
