"""Box-world simulation and the closed-loop sense/estimate/plan/act runner.

The world holds axis-aligned box obstacles.  Sensing is an ideal
spherical ray cast (first hit per ray, optional radial Gaussian noise);
ground truth for validation is the exact signed distance to the nearest
box surface minus the agent radius.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from shplan.freespace import (
    EstimationParams,
    InfeasibleError,
    SolveDiagnostics,
    estimate_freespace,
)
from shplan.geometry import (
    PointCloud,
    clamp_to_roi,
    directions_to_vectors,
    erode_by_agent_radius,
    fibonacci_directions,
    roi_radius,
)
from shplan.planner import (
    AgentState,
    ControlInput,
    DynamicsParams,
    MPCDiagnostics,
    PlannerParams,
    dynamics_step,
    solve_mpc,
)
from shplan.sh_basis import num_coefficients

__all__ = [
    "Outcome",
    "BoxObstacle",
    "SensorParams",
    "Scenario",
    "StepRecord",
    "TrajectoryLog",
    "ray_box_intersect",
    "simulate_scan",
    "ground_truth_clearance",
    "required_gap",
    "run_closed_loop",
]

#: Consecutive infeasible planning steps tolerated (braking in place)
#: before a run is declared failed.
BRAKE_BUDGET = 5


class Outcome(enum.Enum):
    REACHED_GOAL = "ReachedGoal"
    TIMEOUT = "Timeout"
    COLLISION = "Collision"
    PLANNER_FAILURE = "PlannerFailure"


@dataclass
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        if self.center.shape != (3,) or self.half_extents.shape != (3,):
            raise ValueError("center and half_extents must be 3-vectors")
        if np.any(self.half_extents <= 0):
            raise ValueError("half_extents must be strictly positive")


@dataclass
class SensorParams:
    ray_count: int = 1000
    max_range: float = 20.0
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if self.ray_count < 1:
            raise ValueError("ray_count must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class Scenario:
    """Declarative world plus mission description for one run."""

    start: AgentState
    goal: np.ndarray
    agent_radius: float
    obstacles: list = field(default_factory=list)
    sensor: SensorParams = field(default_factory=SensorParams)
    estimation: EstimationParams = field(default_factory=EstimationParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    goal_tolerance: float = 0.3
    max_steps: int = 300
    seed: int = 0

    def __post_init__(self) -> None:
        self.goal = np.asarray(self.goal, dtype=float)

    def validate(self) -> None:
        if self.goal.shape != (3,) or not np.all(np.isfinite(self.goal)):
            raise ValueError("goal must be a finite 3-vector")
        if self.goal_tolerance <= 0:
            raise ValueError("goal_tolerance must be > 0")
        if self.agent_radius < 0:
            raise ValueError("agent_radius must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        k = num_coefficients(self.estimation.max_order)
        if self.sensor.ray_count < k:
            raise ValueError(
                f"sensor.ray_count must be >= {k} for max_order="
                f"{self.estimation.max_order}")
        if self.estimation.soft_count < k:
            raise ValueError(f"estimation.soft_count must be >= {k}")

    def max_speed(self) -> float:
        """Worst-case commanded speed: gain times the largest input box corner."""
        corner = np.maximum(np.abs(self.planner.u_lb[0:3]),
                            np.abs(self.planner.u_ub[0:3]))
        return self.dynamics.k * float(np.linalg.norm(corner))

    def roi(self) -> float:
        horizon_T = self.planner.horizon * self.dynamics.dt
        return roi_radius(self.max_speed(), horizon_T, self.agent_radius)


@dataclass
class StepRecord:
    step: int
    t: float
    state: AgentState
    applied: ControlInput
    weights: np.ndarray
    min_clearance: float
    timings: dict
    estimator: SolveDiagnostics
    planner: Optional[MPCDiagnostics]
    braked: bool


@dataclass
class TrajectoryLog:
    records: list
    outcome: Outcome
    final_state: AgentState


def _ray_box_spans(origin: np.ndarray, dirs: np.ndarray, box: BoxObstacle):
    """Slab intersection over many rays; returns (t_near, t_far) arrays."""
    lo = box.center - box.half_extents - origin
    hi = box.center + box.half_extents - origin
    n = dirs.shape[0]
    t_near = np.full(n, -np.inf)
    t_far = np.full(n, np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        nonzero = d != 0.0
        t1 = np.zeros(n)
        t2 = np.zeros(n)
        np.divide(lo[axis], d, out=t1, where=nonzero)
        np.divide(hi[axis], d, out=t2, where=nonzero)
        tmin_axis = np.minimum(t1, t2)
        tmax_axis = np.maximum(t1, t2)
        # parallel rays: the slab either never constrains (origin inside
        # it) or the intersection interval is empty
        inside = (lo[axis] <= 0.0) & (hi[axis] >= 0.0)
        tmin_axis[~nonzero] = -np.inf if inside else np.inf
        tmax_axis[~nonzero] = np.inf if inside else -np.inf
        t_near = np.maximum(t_near, tmin_axis)
        t_far = np.minimum(t_far, tmax_axis)
    return t_near, t_far


def ray_box_intersect(origin, direction, box: BoxObstacle) -> Optional[float]:
    """Nearest non-negative hit distance, or None when the ray misses.

    An origin inside the box returns 0.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    t_near, t_far = _ray_box_spans(origin, direction.reshape(1, 3), box)
    if t_near[0] > t_far[0] or t_far[0] < 0.0:
        return None
    return float(max(t_near[0], 0.0))


def simulate_scan(state: AgentState, obstacles: Sequence[BoxObstacle],
                  sensor: SensorParams, rng: Optional[np.random.Generator] = None,
                  eps_r: float = 0.05) -> PointCloud:
    """Cast rays along a Fibonacci direction set from the agent position.

    Hits within max_range become agent-centered points; misses yield no
    point.  Optional radial Gaussian noise is clamped at eps_r.
    """
    angles = fibonacci_directions(sensor.ray_count)
    dirs = directions_to_vectors(angles)
    dist = np.full(sensor.ray_count, np.inf)
    for box in obstacles:
        t_near, t_far = _ray_box_spans(state.p, dirs, box)
        hit = (t_near <= t_far) & (t_far >= 0.0)
        d = np.where(hit, np.maximum(t_near, 0.0), np.inf)
        dist = np.minimum(dist, d)
    mask = dist <= sensor.max_range
    radii = dist[mask]
    if rng is not None and sensor.noise_std > 0.0 and radii.size:
        radii = np.maximum(radii + rng.normal(0.0, sensor.noise_std, radii.size),
                           eps_r)
    points = dirs[mask] * radii[:, None]
    return PointCloud(points, frame_origin=state.p.copy())


def _box_surface_distance(p: np.ndarray, box: BoxObstacle) -> float:
    """Signed distance to the box surface (negative inside)."""
    q = np.abs(p - box.center) - box.half_extents
    outside = np.linalg.norm(np.maximum(q, 0.0))
    inside = min(float(np.max(q)), 0.0)
    return float(outside + inside)


def ground_truth_clearance(p, obstacles: Sequence[BoxObstacle], r_a: float) -> float:
    """Distance from p to the nearest box surface (negative inside) minus r_a."""
    p = np.asarray(p, dtype=float)
    if not obstacles:
        return math.inf
    return min(_box_surface_distance(p, box) for box in obstacles) - r_a


def required_gap(r_a: float, w_b: float, dims: int) -> float:
    """Gap an ellipsoid-bounded planner needs between two boxes of width w_b."""
    if r_a < 0 or w_b < 0:
        raise ValueError("r_a and w_b must be >= 0")
    if dims == 2:
        return 2.0 * r_a + w_b * (math.sqrt(2.0) - 1.0)
    if dims == 3:
        return 2.0 * r_a + w_b * (math.sqrt(3.0) - 1.0)
    raise ValueError(f"dims must be 2 or 3, got {dims}")


def _path_min_clearance(state: AgentState, u: ControlInput, scenario: Scenario,
                        end_state: AgentState) -> float:
    """Ground-truth clearance along one applied step, sampled at quarters.

    The quarter states re-integrate the same input noise-free; the actual
    (possibly noisy) end state is included as well.
    """
    if not scenario.obstacles:
        return math.inf
    r_a = scenario.agent_radius
    worst = min(
        ground_truth_clearance(state.p, scenario.obstacles, r_a),
        ground_truth_clearance(end_state.p, scenario.obstacles, r_a),
    )
    quarter = replace(scenario.dynamics, dt=scenario.dynamics.dt / 4.0)
    s = state
    for _ in range(4):
        s = dynamics_step(s, u, quarter)
        worst = min(worst, ground_truth_clearance(s.p, scenario.obstacles, r_a))
    return worst


def run_closed_loop(scenario: Scenario) -> TrajectoryLog:
    """Run sense -> preprocess -> estimate -> plan -> act to completion.

    Applies only the first planned input each iteration (receding
    horizon) and warm-starts the next solve from the shifted plan.  An
    infeasible planning step commands a brake (zero input) and re-senses;
    more than BRAKE_BUDGET consecutive brakes end the run.
    """
    scenario.validate()
    if scenario.obstacles and ground_truth_clearance(
            scenario.start.p, scenario.obstacles, scenario.agent_radius) < 0:
        raise ValueError("start state collides with the ground-truth world")

    rng = np.random.default_rng(scenario.seed)
    r_roi = scenario.roi()
    free_r = r_roi - scenario.agent_radius
    if free_r <= 0:
        raise ValueError("ROI radius does not exceed the agent radius")
    est_params = scenario.estimation
    if est_params.free_radius is None:
        est_params = replace(est_params, free_radius=free_r)

    state = scenario.start
    warm = None
    consecutive_infeasible = 0
    records: list[StepRecord] = []
    outcome = None

    for step in range(scenario.max_steps):
        if np.linalg.norm(state.p - scenario.goal) <= scenario.goal_tolerance:
            outcome = Outcome.REACHED_GOAL
            break

        t0 = time.perf_counter()
        scan = simulate_scan(state, scenario.obstacles, scenario.sensor, rng,
                             eps_r=est_params.eps_r)
        t1 = time.perf_counter()
        cloud = erode_by_agent_radius(clamp_to_roi(scan, r_roi),
                                      scenario.agent_radius, est_params.eps_r)
        t2 = time.perf_counter()
        est = estimate_freespace(cloud, est_params)
        t3 = time.perf_counter()

        braked = False
        planner_diag = None
        try:
            inputs, _, planner_diag = solve_mpc(
                est, state, scenario.goal, scenario.planner, scenario.dynamics,
                warm=warm)
            u0 = inputs[0]
            warm = inputs
            consecutive_infeasible = 0
        except InfeasibleError:
            u0 = ControlInput(np.zeros(3), 0.0)
            warm = None
            braked = True
            consecutive_infeasible += 1
        t4 = time.perf_counter()

        if braked and consecutive_infeasible > BRAKE_BUDGET:
            outcome = Outcome.PLANNER_FAILURE
            break

        next_state = dynamics_step(state, u0, scenario.dynamics, rng)
        min_clear = _path_min_clearance(state, u0, scenario, next_state)
        t5 = time.perf_counter()

        records.append(StepRecord(
            step=step,
            t=step * scenario.dynamics.dt,
            state=state,
            applied=u0,
            weights=est.expansion.weights.copy(),
            min_clearance=min_clear,
            timings={
                "sense": t1 - t0,
                "preprocess": t2 - t1,
                "estimate": t3 - t2,
                "plan": t4 - t3,
                "act": t5 - t4,
            },
            estimator=est.diagnostics,
            planner=planner_diag,
            braked=braked,
        ))
        state = next_state

        if min_clear < 0.0:
            outcome = Outcome.COLLISION
            break

    if outcome is None:
        if np.linalg.norm(state.p - scenario.goal) <= scenario.goal_tolerance:
            outcome = Outcome.REACHED_GOAL
        else:
            outcome = Outcome.TIMEOUT
    return TrajectoryLog(records=records, outcome=outcome, final_state=state)
