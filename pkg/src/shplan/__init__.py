"""Local motion planning with spherical-harmonic free-space estimation.

The pipeline fits a star-convex radius field r(theta, phi) to eroded
range-scan returns by constrained least squares, then plans
receding-horizon trajectories whose waypoints stay inside the fitted
surface.
"""

__version__ = "0.1.0"

from shplan.sh_basis import (
    RealSHExpansion,
    assoc_legendre,
    design_matrix,
    eval_radius,
    flat_index,
    real_sh,
)
from shplan.geometry import (
    PointCloud,
    cart_to_sph,
    clamp_to_roi,
    erode_by_agent_radius,
    fibonacci_directions,
    roi_radius,
    sph_to_cart,
)
from shplan.freespace import (
    EstimationParams,
    FreeSpaceEstimate,
    InfeasibleError,
    build_qp,
    estimate_freespace,
    signed_clearance,
    solve_qp,
)
from shplan.planner import (
    AgentState,
    ControlInput,
    DynamicsParams,
    PlannerParams,
    dynamics_step,
    heading_rotation,
    solve_mpc,
    trajectory_cost,
)
from shplan.sim import (
    BoxObstacle,
    Outcome,
    Scenario,
    SensorParams,
    TrajectoryLog,
    ground_truth_clearance,
    ray_box_intersect,
    required_gap,
    run_closed_loop,
    simulate_scan,
)

__all__ = [
    "AgentState",
    "BoxObstacle",
    "ControlInput",
    "DynamicsParams",
    "EstimationParams",
    "FreeSpaceEstimate",
    "InfeasibleError",
    "Outcome",
    "PlannerParams",
    "PointCloud",
    "RealSHExpansion",
    "Scenario",
    "SensorParams",
    "TrajectoryLog",
    "assoc_legendre",
    "build_qp",
    "cart_to_sph",
    "clamp_to_roi",
    "design_matrix",
    "dynamics_step",
    "erode_by_agent_radius",
    "estimate_freespace",
    "eval_radius",
    "fibonacci_directions",
    "flat_index",
    "ground_truth_clearance",
    "heading_rotation",
    "ray_box_intersect",
    "real_sh",
    "required_gap",
    "roi_radius",
    "run_closed_loop",
    "signed_clearance",
    "simulate_scan",
    "solve_mpc",
    "solve_qp",
    "sph_to_cart",
    "trajectory_cost",
]
