"""Linear stochastic robot models, feedback execution and expected-belief propagation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .gaussian import DimensionError, GaussianBelief, check_covariance


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def dlqr_gain(A: np.ndarray, B: np.ndarray, state_weight=None, control_weight=None) -> np.ndarray:
    """Discrete LQR gain for u = -K x; unit weights by default."""
    n, p = B.shape
    Qw = np.eye(n) if state_weight is None else np.asarray(state_weight, dtype=float)
    Rw = np.eye(p) if control_weight is None else np.asarray(control_weight, dtype=float)
    P = scipy.linalg.solve_discrete_are(A, B, Qw, Rw)
    return np.linalg.solve(B.T @ P @ B + Rw, B.T @ P @ A)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    K_gain: np.ndarray | None = None
    dt: float = 1.0
    position_indices: tuple[int, ...] = (0, 1)
    closed_loop: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A, B, C = (np.atleast_2d(np.array(m, dtype=float)) for m in (self.A, self.B, self.C))
        Q, R = (np.atleast_2d(np.array(m, dtype=float)) for m in (self.Q, self.R))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A must be square")
        if B.shape[0] != n:
            raise DimensionError("B rows must match the state dimension")
        if C.shape[1] != n:
            raise DimensionError("C columns must match the state dimension")
        check_covariance(Q, n)
        check_covariance(R, C.shape[0])
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) < n:
            raise ValueError("(A, B) is not controllable")
        obsv = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n)])
        if np.linalg.matrix_rank(obsv) < n:
            raise ValueError("(A, C) is not observable")
        K = dlqr_gain(A, B) if self.K_gain is None else np.atleast_2d(np.array(self.K_gain, dtype=float))
        if K.shape != (B.shape[1], n):
            raise DimensionError(f"K_gain must be {B.shape[1]}x{n}, got {K.shape}")
        idx = tuple(int(i) for i in self.position_indices)
        if any(i < 0 or i >= n for i in idx):
            raise DimensionError("position index out of range")
        for name, val in (("A", A), ("B", B), ("C", C), ("Q", Q), ("R", R), ("K_gain", K)):
            object.__setattr__(self, name, _frozen(val))
        object.__setattr__(self, "position_indices", idx)
        object.__setattr__(self, "closed_loop", _frozen(A - B @ K))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True, eq=False)
class ExpectedBeliefState:
    sigma: np.ndarray
    lambda_: np.ndarray
    gamma: np.ndarray

    @classmethod
    def initial(cls, cov) -> "ExpectedBeliefState":
        sigma = _frozen(_sym(np.asarray(cov, dtype=float)))
        lam = _frozen(np.zeros_like(sigma))
        return cls(sigma, lam, sigma)

    @classmethod
    def from_parts(cls, sigma, lambda_) -> "ExpectedBeliefState":
        sigma = _frozen(_sym(sigma))
        lam = _frozen(_sym(lambda_))
        return cls(sigma, lam, _frozen(sigma + lam))


@dataclass(frozen=True, eq=False)
class MotionPlan:
    controls: np.ndarray  # (T, p)
    nominal_states: np.ndarray  # (T+1, n)
    beliefs: tuple[ExpectedBeliefState, ...]

    def __post_init__(self):
        states = np.atleast_2d(np.array(self.nominal_states, dtype=float))
        p = np.shape(self.controls)[-1] if np.ndim(self.controls) == 2 else 1
        controls = np.array(self.controls, dtype=float).reshape(-1, p)
        if len(states) != len(controls) + 1 or len(self.beliefs) != len(states):
            raise DimensionError("plan lengths inconsistent: need |X| = |beliefs| = |U| + 1")
        object.__setattr__(self, "controls", _frozen(controls))
        object.__setattr__(self, "nominal_states", _frozen(states))
        object.__setattr__(self, "beliefs", tuple(self.beliefs))

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def belief_at(self, k: int) -> GaussianBelief:
        """Expected belief at step k; steps past the horizon hold the terminal belief."""
        k = min(k, self.horizon)
        return GaussianBelief(self.nominal_states[k], self.beliefs[k].gamma)

    def position_at(self, k: int, position_indices) -> tuple[np.ndarray, np.ndarray]:
        k = min(k, self.horizon)
        idx = list(position_indices)
        return self.nominal_states[k, idx], self.beliefs[k].gamma[np.ix_(idx, idx)]


def propagate_nominal(sys: LinearSystem, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (sys.n,) or u.shape != (sys.p,):
        raise DimensionError(f"expected x in R^{sys.n} and u in R^{sys.p}")
    return sys.A @ x + sys.B @ u


def feedback_control(sys: LinearSystem, u_nom, x_hat, x_nom) -> np.ndarray:
    u_nom = np.atleast_1d(np.asarray(u_nom, dtype=float))
    x_hat = np.asarray(x_hat, dtype=float)
    x_nom = np.asarray(x_nom, dtype=float)
    if u_nom.shape != (sys.p,) or x_hat.shape != (sys.n,) or x_nom.shape != (sys.n,):
        raise DimensionError("feedback_control dimension mismatch")
    return u_nom - sys.K_gain @ (x_hat - x_nom)


def kalman_gain(sys: LinearSystem, sigma_prior: np.ndarray) -> np.ndarray:
    innovation = sys.C @ sigma_prior @ sys.C.T + sys.R
    try:
        return np.linalg.solve(innovation.T, (sigma_prior @ sys.C.T).T).T
    except np.linalg.LinAlgError:
        # noise-free measurements of a known state: the pseudo-inverse gives the zero gain
        return sigma_prior @ sys.C.T @ np.linalg.pinv(innovation)


def expected_belief_step(sys: LinearSystem, prev: ExpectedBeliefState) -> ExpectedBeliefState:
    """One step of the online-KF covariance and estimate-dispersion recursion."""
    A, C = sys.A, sys.C
    sigma_prior = _sym(A @ prev.sigma @ A.T + sys.Q)
    L = kalman_gain(sys, sigma_prior)
    gain_term = L @ C @ sigma_prior
    sigma = sigma_prior - gain_term
    F = sys.closed_loop
    lam = F @ prev.lambda_ @ F.T + gain_term
    return ExpectedBeliefState.from_parts(sigma, lam)


class CovarianceSchedule:
    """Lazily extended table of expected-belief covariances indexed by timestep.

    The recursion is independent of the nominal trajectory for a time-invariant
    system, so every node of a search tree at step k shares the same state.
    """

    def __init__(self, sys: LinearSystem, initial_cov):
        self.sys = sys
        self.states: list[ExpectedBeliefState] = [ExpectedBeliefState.initial(initial_cov)]
        self._positions: list[np.ndarray] = []

    def __getitem__(self, k: int) -> ExpectedBeliefState:
        while len(self.states) <= k:
            self.states.append(expected_belief_step(self.sys, self.states[-1]))
        return self.states[k]

    def position_cov(self, k: int, position_indices=None) -> np.ndarray:
        idx = list(self.sys.position_indices if position_indices is None else position_indices)
        return self[k].gamma[np.ix_(idx, idx)]

    def trajectory(self, steps: int) -> tuple[ExpectedBeliefState, ...]:
        self[steps]
        return tuple(self.states[: steps + 1])


def rollout_plan(sys: LinearSystem, x0: GaussianBelief, controls, schedule: CovarianceSchedule | None = None) -> MotionPlan:
    U = np.asarray(controls, dtype=float).reshape(-1, sys.p)
    if len(U) == 0:
        raise ValueError("controls must be nonempty")
    if x0.dim != sys.n:
        raise DimensionError("initial belief dimension does not match the system")
    X = np.empty((len(U) + 1, sys.n))
    X[0] = x0.mean
    for k, u in enumerate(U):
        X[k + 1] = sys.A @ X[k] + sys.B @ u
    sched = schedule if schedule is not None else CovarianceSchedule(sys, x0.cov)
    return MotionPlan(U, X, sched.trajectory(len(U)))


def simulate_rollouts(
    sys: LinearSystem,
    plan: MotionPlan,
    x0_samples: np.ndarray,
    rng: np.random.Generator,
    extra_steps: int = 0,
) -> np.ndarray:
    """Vectorised closed-loop execution of ``plan`` for a batch of initial states.

    True dynamics with sampled process noise, a Kalman filter on noisy
    measurements, and the tracking controller. After the horizon the reference
    holds the terminal nominal state with zero feed-forward control for
    ``extra_steps`` further steps. Returns true states (N, T+1+extra, n).
    """
    x = np.array(x0_samples, dtype=float).reshape(-1, sys.n)
    N = len(x)
    T = plan.horizon
    A, B, C, K = sys.A, sys.B, sys.C, sys.K_gain
    x_hat = np.repeat(plan.nominal_states[0][None, :], N, axis=0)
    sigma = plan.beliefs[0].sigma.copy()
    chol_q = _safe_cholesky(sys.Q)
    chol_r = _safe_cholesky(sys.R)
    out = np.empty((N, T + 1 + extra_steps, sys.n))
    out[:, 0] = x
    zero_u = np.zeros(sys.p)
    for k in range(T + extra_steps):
        if k < T:
            u_nom, x_nom = plan.controls[k], plan.nominal_states[k]
        else:
            u_nom, x_nom = zero_u, plan.nominal_states[T]
        u = u_nom[None, :] - (x_hat - x_nom[None, :]) @ K.T
        w = rng.standard_normal((N, sys.n)) @ chol_q.T
        x = x @ A.T + u @ B.T + w
        v = rng.standard_normal((N, sys.m)) @ chol_r.T
        y = x @ C.T + v
        sigma_prior = _sym(A @ sigma @ A.T + sys.Q)
        L = kalman_gain(sys, sigma_prior)
        x_prior = x_hat @ A.T + u @ B.T
        x_hat = x_prior + (y - x_prior @ C.T) @ L.T
        sigma = _sym(sigma_prior - L @ C @ sigma_prior)
        out[:, k + 1] = x
    return out


def _safe_cholesky(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_sym(m))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def closed_loop_simulate(sys: LinearSystem, plan: MotionPlan, x0_sample, seed: int) -> np.ndarray:
    """Single closed-loop execution; deterministic for a fixed seed. Returns (T+1, n)."""
    rng = np.random.default_rng(seed)
    return simulate_rollouts(sys, plan, np.asarray(x0_sample, dtype=float)[None, :], rng)[0]


# ---------------------------------------------------------------------------
# Second-order unicycle through feedback linearization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnicycleMaps:
    """Coordinate changes between (x, y, theta, v) and the linearized (x, y, vx, vy)."""

    def to_linear_state(self, state) -> np.ndarray:
        x, y, theta, v = (float(s) for s in state)
        return np.array([x, y, v * math.cos(theta), v * math.sin(theta)])

    def to_unicycle_state(self, z) -> np.ndarray:
        x, y, vx, vy = (float(s) for s in z)
        return np.array([x, y, math.atan2(vy, vx), math.hypot(vx, vy)])

    def to_linear_input(self, state, control) -> np.ndarray:
        _, _, theta, v = (float(s) for s in state)
        omega, a = (float(c) for c in control)
        c, s = math.cos(theta), math.sin(theta)
        return np.array([a * c - v * omega * s, a * s + v * omega * c])

    def to_unicycle_input(self, state, linear_input) -> np.ndarray:
        """(ax, ay) -> (omega, a); undefined at zero speed."""
        _, _, theta, v = (float(s) for s in state)
        if abs(v) < 1e-12:
            raise ValueError("feedback linearization is singular at v = 0")
        ax, ay = (float(c) for c in linear_input)
        c, s = math.cos(theta), math.sin(theta)
        return np.array([(-s * ax + c * ay) / v, c * ax + s * ay])


def make_unicycle_system(dt: float, noise_q: float, noise_r: float) -> tuple[LinearSystem, UnicycleMaps]:
    """Exact zero-order-hold double integrator in the flat outputs of the unicycle."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    I2 = np.eye(2)
    Z2 = np.zeros((2, 2))
    A = np.block([[I2, dt * I2], [Z2, I2]])
    B = np.vstack([0.5 * dt * dt * I2, dt * I2])
    C = np.eye(4)
    Q = np.zeros((4, 4))
    Q[2:, 2:] = noise_q**2 * I2
    R = noise_r**2 * np.eye(4)
    return LinearSystem(A, B, C, Q, R, dt=dt, position_indices=(0, 1)), UnicycleMaps()


def make_linear2d_system(noise_q: float = 0.1, noise_r: float = 0.1, dt: float = 1.0) -> LinearSystem:
    """x_{k+1} = x_k + u_k + w_k, fully observed; ``dt`` only scales plan durations."""
    I2 = np.eye(2)
    return LinearSystem(I2, I2, I2, noise_q**2 * I2, noise_r**2 * I2, dt=dt, position_indices=(0, 1))


def compose_systems(systems: Sequence[LinearSystem]) -> LinearSystem:
    """Block-diagonal composition of independent systems sharing one timestep."""
    if len(systems) < 1:
        raise ValueError("need at least one system")
    dts = {s.dt for s in systems}
    if len(dts) != 1:
        raise ValueError("composed systems must share dt")
    offsets = np.cumsum([0] + [s.n for s in systems[:-1]])
    pos = tuple(int(o + i) for s, o in zip(systems, offsets) for i in s.position_indices)
    bd = scipy.linalg.block_diag
    return LinearSystem(
        bd(*[s.A for s in systems]),
        bd(*[s.B for s in systems]),
        bd(*[s.C for s in systems]),
        bd(*[s.Q for s in systems]),
        bd(*[s.R for s in systems]),
        K_gain=bd(*[s.K_gain for s in systems]),
        dt=systems[0].dt,
        position_indices=pos,
    )
