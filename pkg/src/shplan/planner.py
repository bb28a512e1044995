"""Receding-horizon trajectory optimization inside a fitted free space.

State is (p, psi, v, psi_dot): world position, heading, body-frame
velocity, heading rate.  The continuous model is

    p_dot   = R(psi) v
    v_dot   = (-v + k u_v) / tau
    psi_ddot = (-psi_dot + k_psi u_psi) / tau_psi

integrated by RK4 with internal substepping fine enough that the linear
velocity loop matches its matrix exponential to well below 1e-6 per
control step.

The planner transcribes by single shooting over the N commanded inputs.
Waypoint clearance and state-box constraints enter through a squared-
hinge exterior penalty whose weight escalates until the rollout is
feasible to the collision tolerance; each penalty stage is minimized by
bound-constrained quasi-Newton steps (L-BFGS-B) using gradients
backpropagated through the exact RK4 step Jacobians.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from shplan.freespace import FreeSpaceEstimate, InfeasibleError, clearance_and_gradient

__all__ = [
    "AgentState",
    "ControlInput",
    "DynamicsParams",
    "PlannerParams",
    "MPCDiagnostics",
    "heading_rotation",
    "dynamics_step",
    "trajectory_cost",
    "solve_mpc",
]

_STATE_DIM = 8
_INPUT_DIM = 4


def _wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass
class AgentState:
    """Drone state: world position, heading, body velocity, heading rate."""

    p: np.ndarray
    psi: float = 0.0
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    psi_dot: float = 0.0

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.psi = _wrap_angle(float(self.psi))
        self.psi_dot = float(self.psi_dot)
        if self.p.shape != (3,) or self.v.shape != (3,):
            raise ValueError("p and v must be 3-vectors")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v))
                and math.isfinite(self.psi) and math.isfinite(self.psi_dot)):
            raise ValueError("state entries must be finite")

    def as_vector(self) -> np.ndarray:
        out = np.empty(_STATE_DIM)
        out[0:3] = self.p
        out[3] = self.psi
        out[4:7] = self.v
        out[7] = self.psi_dot
        return out

    @classmethod
    def from_vector(cls, s: np.ndarray) -> "AgentState":
        s = np.asarray(s, dtype=float)
        return cls(p=s[0:3].copy(), psi=float(s[3]), v=s[4:7].copy(),
                   psi_dot=float(s[7]))


@dataclass
class ControlInput:
    """Commanded body-frame velocity and heading rate."""

    u_v: np.ndarray
    u_psi: float = 0.0

    def __post_init__(self) -> None:
        self.u_v = np.asarray(self.u_v, dtype=float)
        self.u_psi = float(self.u_psi)
        if self.u_v.shape != (3,):
            raise ValueError("u_v must be a 3-vector")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.u_v, [self.u_psi]])

    @classmethod
    def from_vector(cls, u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return cls(u_v=u[0:3].copy(), u_psi=float(u[3]))


@dataclass
class DynamicsParams:
    tau: float = 0.3
    k: float = 1.0
    tau_psi: float = 0.3
    k_psi: float = 1.0
    dt: float = 0.5
    noise_std: np.ndarray = field(default_factory=lambda: np.zeros(_STATE_DIM))

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.tau_psi <= 0 or self.dt <= 0:
            raise ValueError("tau, tau_psi and dt must be > 0")
        std = np.asarray(self.noise_std, dtype=float)
        if std.ndim == 0:
            std = np.full(_STATE_DIM, float(std))
        if std.shape != (_STATE_DIM,) or np.any(std < 0):
            raise ValueError("noise_std must be a scalar or 8-vector, >= 0")
        self.noise_std = std


def _pd_matrix(value, dim: int, name: str) -> np.ndarray:
    mat = np.asarray(value, dtype=float)
    if mat.ndim == 0:
        mat = float(mat) * np.eye(dim)
    elif mat.ndim == 1:
        if mat.shape != (dim,):
            raise ValueError(f"{name} diagonal must have length {dim}")
        mat = np.diag(mat)
    if mat.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}")
    if np.linalg.eigvalsh((mat + mat.T) / 2.0).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return mat


@dataclass
class PlannerParams:
    """Horizon, weights, bounds and tolerances of the trajectory problem."""

    horizon: int = 4
    P: np.ndarray = 1.0                     # position-error weight, 3x3
    Q: np.ndarray = 1.0                     # input weight, 4x4
    u_lb: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0, -1.0, -1.0]))
    u_ub: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0, 1.0]))
    x_lb: np.ndarray = field(default_factory=lambda: np.full(_STATE_DIM, -np.inf))
    x_ub: np.ndarray = field(default_factory=lambda: np.full(_STATE_DIM, np.inf))
    collision_tol: float = 1e-6
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.P = _pd_matrix(self.P, 3, "P")
        self.Q = _pd_matrix(self.Q, 4, "Q")
        self.u_lb = np.asarray(self.u_lb, dtype=float)
        self.u_ub = np.asarray(self.u_ub, dtype=float)
        self.x_lb = np.asarray(self.x_lb, dtype=float)
        self.x_ub = np.asarray(self.x_ub, dtype=float)
        if self.u_lb.shape != (_INPUT_DIM,) or self.u_ub.shape != (_INPUT_DIM,):
            raise ValueError("input bounds must be 4-vectors")
        if self.x_lb.shape != (_STATE_DIM,) or self.x_ub.shape != (_STATE_DIM,):
            raise ValueError("state bounds must be 8-vectors")
        if np.any(self.u_lb > self.u_ub) or np.any(self.x_lb > self.x_ub):
            raise ValueError("lower bounds must not exceed upper bounds")


@dataclass
class MPCDiagnostics:
    iterations: int
    stages: int
    cost: float
    max_violation: float
    status: str  # "converged" | "max_iterations"
    wall_time: float
    merit_history: list = field(default_factory=list)


def heading_rotation(psi: float) -> np.ndarray:
    """Rotation about the world z-axis by the heading angle."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _deriv(s: np.ndarray, u: np.ndarray, dyn: DynamicsParams) -> np.ndarray:
    psi = s[3]
    v = s[4:7]
    out = np.empty(_STATE_DIM)
    out[0:3] = heading_rotation(psi) @ v
    out[3] = s[7]
    out[4:7] = (-v + dyn.k * u[0:3]) / dyn.tau
    out[7] = (-s[7] + dyn.k_psi * u[3]) / dyn.tau_psi
    return out


def _state_jacobian(s: np.ndarray, dyn: DynamicsParams) -> np.ndarray:
    psi = s[3]
    v = s[4:7]
    c, si = math.cos(psi), math.sin(psi)
    A = np.zeros((_STATE_DIM, _STATE_DIM))
    A[0:3, 4:7] = heading_rotation(psi)
    # d(R(psi) v)/dpsi
    A[0, 3] = -si * v[0] - c * v[1]
    A[1, 3] = c * v[0] - si * v[1]
    A[3, 7] = 1.0
    A[4:7, 4:7] = -np.eye(3) / dyn.tau
    A[7, 7] = -1.0 / dyn.tau_psi
    return A


def _input_jacobian(dyn: DynamicsParams) -> np.ndarray:
    B = np.zeros((_STATE_DIM, _INPUT_DIM))
    B[4:7, 0:3] = (dyn.k / dyn.tau) * np.eye(3)
    B[7, 3] = dyn.k_psi / dyn.tau_psi
    return B


def _substeps(dyn: DynamicsParams) -> int:
    # substep <= min(tau, tau_psi)/16 keeps the RK4 error of the linear
    # lag loops below 1e-6 over a control step even at dt/tau ~ 1.7
    h_max = min(dyn.tau, dyn.tau_psi) / 16.0
    return max(1, math.ceil(dyn.dt / h_max))


def _rk4(s: np.ndarray, u: np.ndarray, dyn: DynamicsParams, h: float) -> np.ndarray:
    k1 = _deriv(s, u, dyn)
    k2 = _deriv(s + 0.5 * h * k1, u, dyn)
    k3 = _deriv(s + 0.5 * h * k2, u, dyn)
    k4 = _deriv(s + h * k3, u, dyn)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate(s: np.ndarray, u: np.ndarray, dyn: DynamicsParams) -> np.ndarray:
    n = _substeps(dyn)
    h = dyn.dt / n
    for _ in range(n):
        s = _rk4(s, u, dyn, h)
    s = s.copy()
    s[3] = _wrap_angle(s[3])
    return s


def _integrate_with_jacobians(s: np.ndarray, u: np.ndarray, dyn: DynamicsParams):
    """One control step plus d(next)/d(state) and d(next)/d(input)."""
    n = _substeps(dyn)
    h = dyn.dt / n
    eye = np.eye(_STATE_DIM)
    Bc = _input_jacobian(dyn)
    A_tot = eye.copy()
    B_tot = np.zeros((_STATE_DIM, _INPUT_DIM))
    for _ in range(n):
        k1 = _deriv(s, u, dyn)
        s2 = s + 0.5 * h * k1
        k2 = _deriv(s2, u, dyn)
        s3 = s + 0.5 * h * k2
        k3 = _deriv(s3, u, dyn)
        s4 = s + h * k3
        k4 = _deriv(s4, u, dyn)

        A1 = _state_jacobian(s, dyn)
        A2 = _state_jacobian(s2, dyn)
        A3 = _state_jacobian(s3, dyn)
        A4 = _state_jacobian(s4, dyn)

        dk1_ds = A1
        dk2_ds = A2 @ (eye + 0.5 * h * dk1_ds)
        dk3_ds = A3 @ (eye + 0.5 * h * dk2_ds)
        dk4_ds = A4 @ (eye + h * dk3_ds)
        A_sub = eye + (h / 6.0) * (dk1_ds + 2.0 * dk2_ds + 2.0 * dk3_ds + dk4_ds)

        dk1_du = Bc
        dk2_du = Bc + A2 @ (0.5 * h * dk1_du)
        dk3_du = Bc + A3 @ (0.5 * h * dk2_du)
        dk4_du = Bc + A4 @ (h * dk3_du)
        B_sub = (h / 6.0) * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)

        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        A_tot = A_sub @ A_tot
        B_tot = A_sub @ B_tot + B_sub
    s = s.copy()
    s[3] = _wrap_angle(s[3])
    return s, A_tot, B_tot


def dynamics_step(x: AgentState, u: ControlInput, params: DynamicsParams,
                  rng: Optional[np.random.Generator] = None) -> AgentState:
    """Advance the state by one control interval.

    Zero-mean Gaussian process noise is added after integration when a
    generator is supplied and the configured std is nonzero.
    """
    s = _integrate(x.as_vector(), u.as_vector(), params)
    if rng is not None and np.any(params.noise_std > 0.0):
        s = s + rng.normal(0.0, params.noise_std)
    return AgentState.from_vector(s)


def trajectory_cost(states: Sequence[AgentState], inputs: Sequence[ControlInput],
                    goal, P, Q) -> float:
    """Sum over t=1..N of P-weighted squared position error plus
    Q-weighted squared input norm."""
    if len(states) != len(inputs) + 1:
        raise ValueError(
            f"need N+1 states and N inputs, got {len(states)} and {len(inputs)}")
    goal = np.asarray(goal, dtype=float)
    if goal.shape != (3,):
        raise ValueError("goal must be a 3-vector")
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != (3, 3) or Q.shape != (4, 4):
        raise ValueError("P must be 3x3 and Q 4x4")
    total = 0.0
    for t in range(1, len(states)):
        e = states[t].p - goal
        u = inputs[t - 1].as_vector()
        total += float(e @ P @ e) + float(u @ Q @ u)
    return total


def _merit_and_grad(z: np.ndarray, s0: np.ndarray, goal: np.ndarray,
                    est: FreeSpaceEstimate, params: PlannerParams,
                    dyn: DynamicsParams, mu: float):
    """Penalized objective and its gradient with respect to the inputs."""
    N = params.horizon
    u_seq = z.reshape(N, _INPUT_DIM)
    states = [s0]
    A_list = []
    B_list = []
    s = s0
    for t in range(N):
        s, A, B = _integrate_with_jacobians(s, u_seq[t], dyn)
        states.append(s)
        A_list.append(A)
        B_list.append(B)

    f = 0.0
    grad_s = [np.zeros(_STATE_DIM) for _ in range(N + 1)]
    grad_u = np.zeros((N, _INPUT_DIM))
    bounded = np.isfinite(params.x_lb) | np.isfinite(params.x_ub)
    for t in range(1, N + 1):
        st = states[t]
        e = st[0:3] - goal
        Pe = params.P @ e
        f += float(e @ Pe)
        grad_s[t][0:3] += 2.0 * Pe

        c, gc = clearance_and_gradient(est, st[0:3])
        if c < 0.0:
            f += mu * c * c
            grad_s[t][0:3] += 2.0 * mu * c * gc

        if bounded.any():
            over = np.maximum(st - params.x_ub, 0.0)
            under = np.maximum(params.x_lb - st, 0.0)
            f += mu * float(over @ over + under @ under)
            grad_s[t] += 2.0 * mu * (over - under)

    for t in range(N):
        Qu = params.Q @ u_seq[t]
        f += float(u_seq[t] @ Qu)
        grad_u[t] += 2.0 * Qu

    lam = grad_s[N]
    for t in range(N - 1, -1, -1):
        grad_u[t] += B_list[t].T @ lam
        if t > 0:
            lam = grad_s[t] + A_list[t].T @ lam
    return f, grad_u.ravel()


def _rollout_violation(z: np.ndarray, s0: np.ndarray, est: FreeSpaceEstimate,
                       params: PlannerParams, dyn: DynamicsParams):
    """Max constraint violation (clearance and state box) of a rollout."""
    N = params.horizon
    u_seq = z.reshape(N, _INPUT_DIM)
    s = s0
    states = [s0]
    worst = 0.0
    for t in range(N):
        s = _integrate(s, u_seq[t], dyn)
        states.append(s)
        c, _ = clearance_and_gradient(est, s[0:3])
        worst = max(worst, -c)
        worst = max(worst, float(np.max(np.maximum(s - params.x_ub, 0.0), initial=0.0)))
        worst = max(worst, float(np.max(np.maximum(params.x_lb - s, 0.0), initial=0.0)))
    return worst, states


# Exterior penalty weights; escalation stops as soon as the rollout is
# feasible to the collision tolerance.
_PENALTY_SCHEDULE = (1e4, 1e6, 1e8, 1e10, 1e12)


def solve_mpc(est: FreeSpaceEstimate, x0: AgentState, goal, params: PlannerParams,
              dyn: DynamicsParams, warm: Optional[Sequence[ControlInput]] = None):
    """Plan N inputs minimizing the goal/effort cost inside the fitted field.

    Returns (inputs, predicted_states, diagnostics).  ``warm`` is the
    previous step's input sequence; it is time-shifted (last input
    repeated) to seed the solver.  Raises InfeasibleError when no iterate
    reaches the collision tolerance or the start state is already outside
    the fitted surface.
    """
    t_start = time.perf_counter()
    goal = np.asarray(goal, dtype=float)
    N = params.horizon
    ctol = params.collision_tol

    c0, _ = clearance_and_gradient(est, x0.p)
    if c0 < -ctol:
        raise InfeasibleError(
            f"start state lies {-c0:.3g} m outside the fitted free space")

    lb = np.tile(params.u_lb, N)
    ub = np.tile(params.u_ub, N)
    if warm is not None and len(warm) == N:
        shifted = [w.as_vector() for w in warm[1:]] + [warm[-1].as_vector()]
        z = np.concatenate(shifted)
    else:
        z = np.zeros(N * _INPUT_DIM)
    z = np.clip(z, lb, ub)

    s0 = x0.as_vector()
    total_iters = 0
    merit_history: list[list[float]] = []
    status = "max_iterations"
    stages = 0
    violation = np.inf
    for mu in _PENALTY_SCHEDULE:
        stages += 1
        hist = [float(_merit_and_grad(z, s0, goal, est, params, dyn, mu)[0])]

        def record(zk, hist=hist, mu=mu):
            hist.append(float(_merit_and_grad(zk, s0, goal, est, params, dyn, mu)[0]))

        res = minimize(
            _merit_and_grad, z, args=(s0, goal, est, params, dyn, mu),
            jac=True, method="L-BFGS-B", bounds=list(zip(lb, ub)),
            callback=record,
            options={"maxiter": params.max_iter, "ftol": 1e-14, "gtol": params.tol},
        )
        z = np.clip(res.x, lb, ub)
        total_iters += int(res.nit)
        merit_history.append(hist)
        violation, states = _rollout_violation(z, s0, est, params, dyn)
        if violation <= ctol:
            status = "converged" if res.status in (0, 1) else "max_iterations"
            break
    if violation > ctol:
        raise InfeasibleError(
            f"no feasible trajectory found (violation {violation:.3g} m)")

    inputs = [ControlInput.from_vector(z[4 * t:4 * t + 4]) for t in range(N)]
    predicted = [x0] + [AgentState.from_vector(s) for s in states[1:]]
    cost = trajectory_cost(predicted, inputs, goal, params.P, params.Q)
    diag = MPCDiagnostics(
        iterations=total_iters,
        stages=stages,
        cost=cost,
        max_violation=float(violation),
        status=status,
        wall_time=time.perf_counter() - t_start,
        merit_history=merit_history,
    )
    return inputs, predicted, diag
