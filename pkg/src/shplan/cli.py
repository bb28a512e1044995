"""Command-line entry point: scenario files, runs, exports, gap report.

Scenario files are YAML with named nested sections (see
``scenarios/corridor.yaml`` for the canonical example).  Angles are
serialized in radians, distances in meters, times in seconds; every
output format carries a format_version marker.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from shplan.freespace import EstimationParams
from shplan.geometry import fibonacci_directions
from shplan.planner import AgentState, DynamicsParams, PlannerParams
from shplan.sh_basis import basis_matrix
from shplan.sim import (
    BoxObstacle,
    Outcome,
    Scenario,
    SensorParams,
    TrajectoryLog,
    required_gap,
    run_closed_loop,
)

__all__ = [
    "ScenarioError",
    "EXIT_CODES",
    "EXIT_CONFIG_ERROR",
    "EXIT_IO_ERROR",
    "parse_scenario",
    "scenario_to_dict",
    "write_scenario",
    "write_run_artifacts",
    "run_command",
    "report_gap_comparison",
    "main",
]

FORMAT_VERSION = 1

EXIT_CODES = {
    Outcome.REACHED_GOAL: 0,
    Outcome.TIMEOUT: 2,
    Outcome.COLLISION: 3,
    Outcome.PLANNER_FAILURE: 4,
}
EXIT_CONFIG_ERROR = 5
EXIT_IO_ERROR = 6


class ScenarioError(ValueError):
    """Scenario file could not be parsed or validated."""


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ScenarioError(f"missing required field {context}.{key}")
    return mapping[key]


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ScenarioError(f"section '{key}' must be a mapping")
    return value


def _number(value, context: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{context} must be a number, got {value!r}")
    return float(value)


def _vec(value, length: int, context: str) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or len(value) != length:
        raise ScenarioError(f"{context} must be a list of {length} numbers")
    return np.array([_number(v, context) for v in value])


def _weight_matrix(value, dim: int, context: str):
    """Accept a scalar, a diagonal list, or a full nested matrix."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            if len(value) != dim:
                raise ScenarioError(f"{context} must be {dim}x{dim}")
            return np.array([[_number(v, context) for v in row] for row in value])
        return _vec(value, dim, context)
    raise ScenarioError(f"{context} must be a number, list or matrix")


def _bounds(value, dim: int, context: str):
    """Symmetric scalar or explicit [lower, upper] lists."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        mag = abs(float(value))
        return -mag * np.ones(dim), mag * np.ones(dim)
    if isinstance(value, (list, tuple)) and len(value) == 2 \
            and all(isinstance(v, (list, tuple)) for v in value):
        return _vec(value[0], dim, context), _vec(value[1], dim, context)
    raise ScenarioError(
        f"{context} must be a symmetric magnitude or [lower, upper] lists")


def scenario_from_dict(raw: dict) -> Scenario:
    """Build and validate a Scenario from a parsed mapping."""
    version = raw.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ScenarioError(f"unsupported format_version {version}")

    start_raw = _section(raw, "start")
    start = AgentState(
        p=_vec(_require(start_raw, "position", "start"), 3, "start.position"),
        psi=_number(start_raw.get("heading", 0.0), "start.heading"),
        v=_vec(start_raw.get("velocity", [0.0, 0.0, 0.0]), 3, "start.velocity"),
        psi_dot=_number(start_raw.get("heading_rate", 0.0), "start.heading_rate"),
    )

    goal_raw = _section(raw, "goal")
    goal = _vec(_require(goal_raw, "position", "goal"), 3, "goal.position")
    goal_tol = _number(goal_raw.get("tolerance", 0.3), "goal.tolerance")

    agent_raw = _section(raw, "agent")
    r_a = _number(_require(agent_raw, "radius", "agent"), "agent.radius")

    obstacles = []
    for i, entry in enumerate(raw.get("obstacles", []) or []):
        if not isinstance(entry, dict):
            raise ScenarioError(f"obstacles[{i}] must be a mapping")
        ctx = f"obstacles[{i}]"
        center = _vec(_require(entry, "center", ctx), 3, f"{ctx}.center")
        half = _vec(_require(entry, "half_extents", ctx), 3, f"{ctx}.half_extents")
        if np.any(half <= 0):
            raise ScenarioError(f"{ctx}.half_extents must be strictly positive")
        obstacles.append(BoxObstacle(center=center, half_extents=half))

    sensor_raw = _section(raw, "sensor")
    sensor = SensorParams(
        ray_count=int(_number(sensor_raw.get("ray_count", 1000), "sensor.ray_count")),
        max_range=_number(sensor_raw.get("max_range", 20.0), "sensor.max_range"),
        noise_std=_number(sensor_raw.get("noise_std", 0.0), "sensor.noise_std"),
    )

    est_raw = _section(raw, "estimation")
    estimation = EstimationParams(
        max_order=int(_number(est_raw.get("max_order", 4), "estimation.max_order")),
        soft_count=int(_number(est_raw.get("soft_directions", 1000),
                               "estimation.soft_directions")),
        weight_cap_factor=_number(est_raw.get("weight_cap_factor", 4.0),
                                  "estimation.weight_cap_factor"),
        tol=_number(est_raw.get("tol", 1e-6), "estimation.tol"),
        max_iter=int(_number(est_raw.get("max_iter", 500), "estimation.max_iter")),
        eps_r=_number(est_raw.get("eps_r", 0.05), "estimation.eps_r"),
    )

    plan_raw = _section(raw, "planner")
    horizon = int(_number(plan_raw.get("horizon_steps", 4), "planner.horizon_steps"))
    horizon_seconds = _number(plan_raw.get("horizon_seconds", 2.0),
                              "planner.horizon_seconds")
    if horizon < 1 or horizon_seconds <= 0:
        raise ScenarioError("planner horizon must be >= 1 step over > 0 seconds")
    u_lb, u_ub = np.full(4, -1.0), np.full(4, 1.0)
    if "input_bounds" in plan_raw:
        ib = _section(plan_raw, "input_bounds")
        v_lb, v_ub = _bounds(ib.get("velocity", 1.0), 3, "planner.input_bounds.velocity")
        h_lb, h_ub = _bounds(ib.get("heading_rate", 1.0), 1,
                             "planner.input_bounds.heading_rate")
        u_lb = np.concatenate([v_lb, h_lb])
        u_ub = np.concatenate([v_ub, h_ub])
    x_lb, x_ub = np.full(8, -np.inf), np.full(8, np.inf)
    if "state_bounds" in plan_raw:
        sb = _section(plan_raw, "state_bounds")
        if "velocity" in sb:
            v_lb, v_ub = _bounds(sb["velocity"], 3, "planner.state_bounds.velocity")
            x_lb[4:7], x_ub[4:7] = v_lb, v_ub
        if "heading_rate" in sb:
            h_lb, h_ub = _bounds(sb["heading_rate"], 1,
                                 "planner.state_bounds.heading_rate")
            x_lb[7], x_ub[7] = h_lb[0], h_ub[0]
    try:
        planner = PlannerParams(
            horizon=horizon,
            P=_weight_matrix(plan_raw.get("position_weight", 1.0), 3,
                             "planner.position_weight"),
            Q=_weight_matrix(plan_raw.get("input_weight", 1.0), 4,
                             "planner.input_weight"),
            u_lb=u_lb, u_ub=u_ub, x_lb=x_lb, x_ub=x_ub,
            collision_tol=_number(plan_raw.get("collision_tol", 1e-6),
                                  "planner.collision_tol"),
            max_iter=int(_number(plan_raw.get("max_iter", 200), "planner.max_iter")),
            tol=_number(plan_raw.get("tol", 1e-6), "planner.tol"),
        )
    except ValueError as exc:
        raise ScenarioError(f"planner: {exc}") from exc

    dyn_raw = _section(raw, "dynamics")
    noise = dyn_raw.get("process_noise_std", 0.0)
    if isinstance(noise, (list, tuple)):
        noise = _vec(noise, 8, "dynamics.process_noise_std")
    else:
        noise = _number(noise, "dynamics.process_noise_std")
    try:
        dynamics = DynamicsParams(
            tau=_number(dyn_raw.get("tau", 0.3), "dynamics.tau"),
            k=_number(dyn_raw.get("gain", 1.0), "dynamics.gain"),
            tau_psi=_number(dyn_raw.get("tau_heading", 0.3), "dynamics.tau_heading"),
            k_psi=_number(dyn_raw.get("gain_heading", 1.0), "dynamics.gain_heading"),
            dt=horizon_seconds / horizon,
            noise_std=noise,
        )
    except ValueError as exc:
        raise ScenarioError(f"dynamics: {exc}") from exc

    scenario = Scenario(
        start=start,
        goal=goal,
        agent_radius=r_a,
        obstacles=obstacles,
        sensor=sensor,
        estimation=estimation,
        planner=planner,
        dynamics=dynamics,
        goal_tolerance=goal_tol,
        max_steps=int(_number(raw.get("max_steps", 300), "max_steps")),
        seed=int(_number(raw.get("seed", 0), "seed")),
    )
    try:
        scenario.validate()
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    return scenario


def parse_scenario(path) -> Scenario:
    """Load and validate a YAML scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario file must contain a mapping")
    return scenario_from_dict(raw)


def scenario_to_dict(sc: Scenario) -> dict:
    """Serializable mapping that round-trips through scenario_from_dict."""
    return {
        "format_version": FORMAT_VERSION,
        "seed": sc.seed,
        "max_steps": sc.max_steps,
        "start": {
            "position": sc.start.p.tolist(),
            "heading": sc.start.psi,
            "velocity": sc.start.v.tolist(),
            "heading_rate": sc.start.psi_dot,
        },
        "goal": {
            "position": sc.goal.tolist(),
            "tolerance": sc.goal_tolerance,
        },
        "agent": {"radius": sc.agent_radius},
        "obstacles": [
            {"center": box.center.tolist(), "half_extents": box.half_extents.tolist()}
            for box in sc.obstacles
        ],
        "sensor": {
            "ray_count": sc.sensor.ray_count,
            "max_range": sc.sensor.max_range,
            "noise_std": sc.sensor.noise_std,
        },
        "estimation": {
            "max_order": sc.estimation.max_order,
            "soft_directions": sc.estimation.soft_count,
            "weight_cap_factor": sc.estimation.weight_cap_factor,
            "tol": sc.estimation.tol,
            "max_iter": sc.estimation.max_iter,
            "eps_r": sc.estimation.eps_r,
        },
        "planner": {
            "horizon_steps": sc.planner.horizon,
            "horizon_seconds": sc.planner.horizon * sc.dynamics.dt,
            "position_weight": sc.planner.P.tolist(),
            "input_weight": sc.planner.Q.tolist(),
            "input_bounds": {
                "velocity": [sc.planner.u_lb[0:3].tolist(),
                             sc.planner.u_ub[0:3].tolist()],
                "heading_rate": [[sc.planner.u_lb[3]], [sc.planner.u_ub[3]]],
            },
            "state_bounds": _state_bounds_to_dict(sc.planner),
            "collision_tol": sc.planner.collision_tol,
            "max_iter": sc.planner.max_iter,
            "tol": sc.planner.tol,
        },
        "dynamics": {
            "tau": sc.dynamics.tau,
            "gain": sc.dynamics.k,
            "tau_heading": sc.dynamics.tau_psi,
            "gain_heading": sc.dynamics.k_psi,
            "process_noise_std": sc.dynamics.noise_std.tolist(),
        },
    }


def _state_bounds_to_dict(planner: PlannerParams) -> dict:
    out = {}
    if np.all(np.isfinite(planner.x_lb[4:7])) and np.all(np.isfinite(planner.x_ub[4:7])):
        out["velocity"] = [planner.x_lb[4:7].tolist(), planner.x_ub[4:7].tolist()]
    if math.isfinite(planner.x_lb[7]) and math.isfinite(planner.x_ub[7]):
        out["heading_rate"] = [[planner.x_lb[7]], [planner.x_ub[7]]]
    return out


def write_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(sc), sort_keys=False))


_TRAJECTORY_COLUMNS = [
    "step", "t_s", "px_m", "py_m", "pz_m", "psi_rad",
    "vx_mps", "vy_mps", "vz_mps", "psi_dot_radps",
    "ux_mps", "uy_mps", "uz_mps", "upsi_radps",
    "min_clearance_m", "braked",
    "sense_ms", "estimate_ms", "plan_ms", "total_ms",
]


def write_run_artifacts(log: TrajectoryLog, sc: Scenario, out_dir,
                        surface_dumps: bool = False) -> None:
    """Write trajectory.csv, summary.json and optional surface dumps."""
    out = Path(out_dir)

    with (out / "trajectory.csv").open("w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(_TRAJECTORY_COLUMNS)
        for rec in log.records:
            total = sum(rec.timings.values())
            writer.writerow([
                rec.step, f"{rec.t:.6f}",
                *(f"{v:.9f}" for v in rec.state.p),
                f"{rec.state.psi:.9f}",
                *(f"{v:.9f}" for v in rec.state.v),
                f"{rec.state.psi_dot:.9f}",
                *(f"{v:.9f}" for v in rec.applied.u_v),
                f"{rec.applied.u_psi:.9f}",
                f"{rec.min_clearance:.9f}" if math.isfinite(rec.min_clearance) else "inf",
                int(rec.braked),
                f"{rec.timings['sense'] * 1e3:.3f}",
                f"{rec.timings['estimate'] * 1e3:.3f}",
                f"{rec.timings['plan'] * 1e3:.3f}",
                f"{total * 1e3:.3f}",
            ])

    positions = [rec.state.p for rec in log.records] + [log.final_state.p]
    path_length = float(sum(
        np.linalg.norm(b - a) for a, b in zip(positions[:-1], positions[1:])))
    min_clear = min((rec.min_clearance for rec in log.records), default=math.inf)
    est_ms = [rec.timings["estimate"] * 1e3 for rec in log.records]
    plan_ms = [rec.timings["plan"] * 1e3 for rec in log.records]
    total_ms = [sum(rec.timings.values()) * 1e3 for rec in log.records]

    def _percentiles(xs):
        if not xs:
            return {"p50": 0.0, "p90": 0.0, "max": 0.0}
        arr = np.asarray(xs)
        return {"p50": float(np.percentile(arr, 50)),
                "p90": float(np.percentile(arr, 90)),
                "max": float(arr.max())}

    summary = {
        "format_version": FORMAT_VERSION,
        "outcome": log.outcome.value,
        "steps": len(log.records),
        "sim_time_s": len(log.records) * sc.dynamics.dt,
        "path_length_m": path_length,
        "min_clearance_m": min_clear if math.isfinite(min_clear) else None,
        "final_distance_to_goal_m": float(np.linalg.norm(log.final_state.p - sc.goal)),
        "timing_ms": {
            "estimate": _percentiles(est_ms),
            "plan": _percentiles(plan_ms),
            "total": _percentiles(total_ms),
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    if surface_dumps and log.records:
        surf_dir = out / "surface"
        surf_dir.mkdir(exist_ok=True)
        dirs = fibonacci_directions(sc.estimation.soft_count)
        basis = basis_matrix(dirs[:, 0], dirs[:, 1], sc.estimation.max_order)
        with (out / "weights.csv").open("w", newline="") as fh:
            fh.write(f"# format_version={FORMAT_VERSION}\n")
            writer = csv.writer(fh)
            writer.writerow(["step"] + [f"w{j}" for j in range(basis.shape[1])])
            for rec in log.records:
                writer.writerow([rec.step] + [f"{w:.9e}" for w in rec.weights])
        for rec in log.records:
            radii = basis @ rec.weights
            with (surf_dir / f"step_{rec.step:04d}.csv").open("w", newline="") as fh:
                fh.write(f"# format_version={FORMAT_VERSION}\n")
                writer = csv.writer(fh)
                writer.writerow(["theta_rad", "phi_rad", "r_sh_m"])
                for (theta, phi), r in zip(dirs, radii):
                    writer.writerow([f"{theta:.9f}", f"{phi:.9f}", f"{r:.9f}"])


def run_command(scenario_path, out_dir, surface_dumps: bool = False,
                seed=None, create: bool = False) -> int:
    """Run one scenario and write its artifacts; returns the exit code."""
    try:
        scenario = parse_scenario(scenario_path)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if seed is not None:
        scenario = replace(scenario, seed=int(seed))

    out = Path(out_dir)
    if not out.is_dir():
        if not create:
            print(f"output directory {out} does not exist (use --create)",
                  file=sys.stderr)
            return EXIT_IO_ERROR
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            print(f"cannot create {out}: {exc}", file=sys.stderr)
            return EXIT_IO_ERROR

    try:
        log = run_closed_loop(scenario)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    try:
        write_run_artifacts(log, scenario, out, surface_dumps=surface_dumps)
    except OSError as exc:
        print(f"cannot write artifacts under {out}: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR

    print(f"outcome={log.outcome.value} steps={len(log.records)} "
          f"final_goal_distance="
          f"{np.linalg.norm(log.final_state.p - scenario.goal):.3f} m")
    return EXIT_CODES[log.outcome]


def report_gap_comparison(r_a: float, widths, out_path, margin: float = 0.4) -> int:
    """Tabulate the gap each approach needs between two boxes of width w_b.

    The ellipsoid-bounded columns grow with the obstacle width; the
    radius-field planner needs 2*r_a plus a fixed maneuvering margin
    regardless of w_b.
    """
    if r_a <= 0:
        print("agent radius must be > 0", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    widths = list(widths)
    if not widths or any(w < 0 for w in widths):
        print("widths must be non-negative", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        with Path(out_path).open("w", newline="") as fh:
            fh.write(f"# format_version={FORMAT_VERSION}\n")
            writer = csv.writer(fh)
            writer.writerow(["w_b_m", "gap_ellipsoid_2d_m", "gap_ellipsoid_3d_m",
                             "gap_sh_m"])
            for w_b in widths:
                writer.writerow([
                    f"{w_b:.6f}",
                    f"{required_gap(r_a, w_b, 2):.6f}",
                    f"{required_gap(r_a, w_b, 3):.6f}",
                    f"{2.0 * r_a + margin:.6f}",
                ])
    except OSError as exc:
        print(f"cannot write {out_path}: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="shplan",
        description="Free-space estimation and receding-horizon planning runs")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario file and export artifacts")
    run_p.add_argument("scenario", help="path to a YAML scenario file")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--surface-dumps", action="store_true",
                       help="also dump per-step fitted surfaces and weights")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--create", action="store_true",
                       help="create the output directory if missing")

    gap_p = sub.add_parser("gap-report",
                           help="tabulate required corridor gaps vs obstacle width")
    gap_p.add_argument("--agent-radius", type=float, required=True)
    gap_p.add_argument("--widths", required=True,
                       help="comma-separated obstacle widths in meters")
    gap_p.add_argument("--out", required=True, help="output CSV path")
    gap_p.add_argument("--margin", type=float, default=0.4,
                       help="maneuvering margin of the radius-field planner")

    val_p = sub.add_parser("validate", help="parse and validate a scenario file")
    val_p.add_argument("scenario", help="path to a YAML scenario file")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_command(args.scenario, args.out,
                           surface_dumps=args.surface_dumps,
                           seed=args.seed, create=args.create)
    if args.command == "gap-report":
        try:
            widths = [float(w) for w in args.widths.split(",") if w.strip()]
        except ValueError:
            print("widths must be comma-separated numbers", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        return report_gap_comparison(args.agent_radius, widths, args.out,
                                     margin=args.margin)
    if args.command == "validate":
        try:
            parse_scenario(args.scenario)
        except ScenarioError as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        print("ok")
        return 0
    return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
