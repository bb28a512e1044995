"""Constrained least-squares estimation of a star-convex free-space field.

The estimator solves

    min_x ||A x - b||^2
    s.t.  0 <= C x <= d        (measured returns cap the surface)
          0 <= A x <= b        (uniform directions keep it inside the ROI sphere)
          h_lb <= x <= h_ub    (weight box, +-cap*r)

where A holds basis values on a uniform direction set, b is the constant
free radius r, and C, d come from the preprocessed scan.  The problem is
small (K = (L+1)^2 <= ~25 variables) and dense, so it is solved with a
primal active-set method: deterministic, exact at the active set, and
cheap enough to run every control step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from shplan.geometry import (
    PointCloud,
    cart_to_sph,
    fibonacci_directions,
    spherical_components,
)
from shplan.sh_basis import (
    RealSHExpansion,
    basis_matrix,
    basis_matrix_with_gradients,
    design_matrix,
    eval_radius,
    num_coefficients,
)

__all__ = [
    "InfeasibleError",
    "QPProblem",
    "SolveDiagnostics",
    "EstimationParams",
    "FreeSpaceEstimate",
    "build_qp",
    "solve_qp",
    "estimate_freespace",
    "signed_clearance",
    "clearance_and_gradient",
]

#: Below this distance from the expansion center, direction is undefined
#: and clearance falls back to the field value along a fixed direction.
EPS_CENTER = 1e-3


class InfeasibleError(RuntimeError):
    """No iterate satisfied the constraints within tolerance."""


@dataclass
class QPProblem:
    """Stacked data of the constrained least-squares fit."""

    A: np.ndarray     # (n, K) soft design matrix
    b: np.ndarray     # (n,)   constant free radius
    C: np.ndarray     # (m, K) hard design matrix at measured directions
    d: np.ndarray     # (m,)   eroded measured radii
    h_lb: np.ndarray  # (K,)   weight lower bounds
    h_ub: np.ndarray  # (K,)   weight upper bounds


@dataclass
class SolveDiagnostics:
    objective: float
    max_violation: float
    iterations: int
    wall_time: float
    status: str  # "converged" | "max_iterations"
    stationarity: float = 0.0


@dataclass
class EstimationParams:
    """Knobs of the per-step free-space fit.

    ``free_radius`` is the ROI free-space radius r (ROI radius minus the
    agent radius); the closed-loop runner fills it in from the scenario
    when left as None.
    """

    max_order: int = 4
    soft_count: int = 1000
    free_radius: Optional[float] = None
    weight_cap_factor: float = 4.0
    tol: float = 1e-6
    max_iter: int = 500
    eps_r: float = 0.05


@dataclass
class FreeSpaceEstimate:
    expansion: RealSHExpansion
    roi_radius: float
    diagnostics: SolveDiagnostics


def build_qp(measured: PointCloud, soft_dirs, r: float, max_order: int,
             weight_cap_factor: float = 4.0) -> QPProblem:
    """Assemble the fit problem from a preprocessed cloud.

    ``soft_dirs`` is a non-empty (n, 2) array of (theta, phi); it must be
    at least as long as the coefficient count so the least-squares system
    stays over-determined.
    """
    if r <= 0:
        raise ValueError(f"free radius must be > 0, got {r}")
    k = num_coefficients(max_order)
    dm = design_matrix(soft_dirs, max_order)
    if dm.values.shape[0] < k:
        raise ValueError(
            f"need at least {k} soft directions for max_order={max_order}, "
            f"got {dm.values.shape[0]}")
    A = dm.values
    b = np.full(A.shape[0], float(r))
    if len(measured) > 0:
        radii, theta, phi = spherical_components(measured.points)
        if np.any(radii > r + 1e-9):
            raise ValueError(
                "measured radii exceed the free radius; run clamp_to_roi and "
                "erode_by_agent_radius first")
        C = basis_matrix(theta, phi, max_order)
        d = np.minimum(radii, r)
    else:
        C = np.zeros((0, k))
        d = np.zeros(0)
    cap = float(weight_cap_factor) * float(r)
    h_ub = np.full(k, cap)
    return QPProblem(A=A, b=b, C=C, d=d, h_lb=-h_ub, h_ub=h_ub)


def _stack_inequalities(qp: QPProblem):
    """All constraints as G x <= h; soft rows first, then measured, then box."""
    k = qp.A.shape[1]
    eye = np.eye(k)
    G = np.vstack([qp.A, -qp.A, qp.C, -qp.C, eye, -eye])
    h = np.concatenate([
        qp.b, np.zeros(qp.A.shape[0]),
        qp.d, np.zeros(qp.C.shape[0]),
        qp.h_ub, -qp.h_lb,
    ])
    return G, h


def solve_qp(qp: QPProblem, tol: float = 1e-6, max_iter: int = 500):
    """Minimize ||A x - b||^2 over the stacked inequalities.

    Primal active-set iteration: starting from the feasible origin, solve
    the equality-constrained subproblem on the working set, step to the
    first blocking constraint, and drop working-set rows with negative
    multipliers once stationary.  Deterministic given identical inputs
    (ties broken by lowest row index).

    Returns (weights, SolveDiagnostics).  Raises InfeasibleError when the
    origin itself violates the constraints (degenerate sensing); on
    hitting ``max_iter`` the best iterate is returned with the status
    flagged.
    """
    t0 = time.perf_counter()
    A, b = qp.A, qp.b
    k = A.shape[1]
    H = 2.0 * (A.T @ A)
    g = -2.0 * (A.T @ b)
    G, h = _stack_inequalities(qp)

    x = np.zeros(k)
    if h.size and np.max(-h) > tol:
        raise InfeasibleError(
            "zero weights violate the constraints; negative radius targets")

    working: list[int] = []
    status = "max_iterations"
    iterations = max_iter
    lam = np.zeros(0)
    for it in range(1, max_iter + 1):
        Gw = G[working]
        nw = len(working)
        kkt = np.zeros((k + nw, k + nw))
        kkt[:k, :k] = H
        if nw:
            kkt[:k, k:] = Gw.T
            kkt[k:, :k] = Gw
        rhs = np.concatenate([-g, h[working]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        x_target = sol[:k]
        lam = sol[k:]
        p = x_target - x
        p_scale = np.max(np.abs(p))
        if p_scale <= 1e-11 * (1.0 + np.max(np.abs(x))):
            if nw == 0 or lam.min() >= -tol:
                status = "converged"
                iterations = it
                break
            working.pop(int(np.argmin(lam)))
            continue
        Gp = G @ p
        slack = h - G @ x
        alpha = 1.0
        blocker = -1
        moving = np.where(Gp > 1e-9 * p_scale)[0]
        if moving.size:
            ratios = np.maximum(slack[moving], 0.0) / Gp[moving]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha = ratios[j]
                blocker = int(moving[j])
        x = x + alpha * p
        if blocker >= 0 and blocker not in working:
            working.append(blocker)

    resid = A @ x - b
    violation = float(max(0.0, np.max(G @ x - h))) if h.size else 0.0
    stat = H @ x + g
    if working:
        stat = stat + G[working].T @ lam
    diag = SolveDiagnostics(
        objective=float(resid @ resid),
        max_violation=violation,
        iterations=iterations,
        wall_time=time.perf_counter() - t0,
        status=status,
        stationarity=float(np.max(np.abs(stat))),
    )
    return x, diag


def estimate_freespace(measured: PointCloud, params: EstimationParams) -> FreeSpaceEstimate:
    """Fit the free-space expansion to a preprocessed cloud."""
    if params.free_radius is None:
        raise ValueError("EstimationParams.free_radius must be set")
    soft = fibonacci_directions(params.soft_count)
    qp = build_qp(measured, soft, params.free_radius, params.max_order,
                  params.weight_cap_factor)
    weights, diag = solve_qp(qp, tol=params.tol, max_iter=params.max_iter)
    expansion = RealSHExpansion(params.max_order, weights,
                                center=measured.frame_origin.copy())
    return FreeSpaceEstimate(expansion=expansion, roi_radius=float(params.free_radius),
                             diagnostics=diag)


def signed_clearance(est: FreeSpaceEstimate, p) -> float:
    """Field radius toward world point p minus its distance from center.

    Non-negative inside the fitted surface.  Within EPS_CENTER of the
    center the direction is undefined and the field is sampled along a
    fixed direction instead (positive whenever the field is).
    """
    q = np.asarray(p, dtype=float) - est.expansion.center
    r_q = float(np.linalg.norm(q))
    if r_q < EPS_CENTER:
        return eval_radius(est.expansion, 0.0, 0.0) - r_q
    s = cart_to_sph(q)
    return eval_radius(est.expansion, s.theta, s.phi) - r_q


def clearance_and_gradient(est: FreeSpaceEstimate, p):
    """Signed clearance and its gradient with respect to p.

    The gradient combines the angular derivatives of the radius field
    with the unit radial direction; inside EPS_CENTER the constraint is
    treated as inactive and the gradient is zero.
    """
    q = np.asarray(p, dtype=float) - est.expansion.center
    r_q = float(np.linalg.norm(q))
    if r_q < EPS_CENTER:
        return eval_radius(est.expansion, 0.0, 0.0) - r_q, np.zeros(3)
    s = cart_to_sph(q)
    w = est.expansion.weights
    Y, dY_dt, dY_dp = basis_matrix_with_gradients(s.theta, s.phi,
                                                  est.expansion.max_order)
    f = float(w @ Y[0])
    df_dt = float(w @ dY_dt[0])
    df_dp = float(w @ dY_dp[0])
    st = np.sin(s.theta)
    ct = np.cos(s.theta)
    cp, sp = np.cos(s.phi), np.sin(s.phi)
    e_r = q / r_q
    e_t = np.array([ct * cp, ct * sp, -st])
    e_p = np.array([-sp, cp, 0.0])
    st_safe = max(st, 1e-12)
    grad = (df_dt * e_t + (df_dp / st_safe) * e_p) / r_q - e_r
    return f - r_q, grad
