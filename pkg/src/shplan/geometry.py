"""Coordinate transforms, scan preprocessing, and direction sampling.

Preprocessing turns a raw agent-centered scan into the radial free-space
cloud the estimator consumes: points beyond the region of interest are
projected onto the ROI sphere, then every point is pulled inward by the
agent radius (floored at ``eps_r``) so the agent can be treated as a
point thereafter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SphericalPoint",
    "PointCloud",
    "cart_to_sph",
    "sph_to_cart",
    "spherical_components",
    "directions_to_vectors",
    "clamp_to_roi",
    "erode_by_agent_radius",
    "roi_radius",
    "fibonacci_directions",
]

_TWO_PI = 2.0 * math.pi
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class SphericalPoint:
    """(r, theta, phi) with r >= 0, theta in [0, pi], phi in [0, 2*pi)."""

    r: float
    theta: float
    phi: float


@dataclass
class PointCloud:
    """Cartesian measurement points in the agent-centered frame, meters."""

    points: np.ndarray
    frame_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.frame_origin = np.asarray(self.frame_origin, dtype=float)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud points must be finite")
        if self.frame_origin.shape != (3,) or not np.all(np.isfinite(self.frame_origin)):
            raise ValueError("frame_origin must be a finite 3-vector")

    def __len__(self) -> int:
        return self.points.shape[0]


def cart_to_sph(p) -> SphericalPoint:
    """Cartesian point to (r, theta, phi); the origin maps to (0, 0, 0)."""
    x, y, z = (float(v) for v in np.asarray(p, dtype=float))
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        return SphericalPoint(0.0, 0.0, 0.0)
    theta = math.acos(min(1.0, max(-1.0, z / r)))
    phi = math.atan2(y, x)
    if phi < 0.0:
        phi += _TWO_PI
    if phi >= _TWO_PI:
        phi = 0.0
    return SphericalPoint(r, theta, phi)


def sph_to_cart(s: SphericalPoint) -> np.ndarray:
    """Inverse transform; exact application of the defining equations."""
    st = math.sin(s.theta)
    return np.array([
        s.r * st * math.cos(s.phi),
        s.r * st * math.sin(s.phi),
        s.r * math.cos(s.theta),
    ])


def spherical_components(points: np.ndarray):
    """Vectorized cart_to_sph over an (n, 3) array; returns (r, theta, phi)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(points, axis=1)
    safe_r = np.where(r > 0.0, r, 1.0)
    theta = np.arccos(np.clip(points[:, 2] / safe_r, -1.0, 1.0))
    phi = np.arctan2(points[:, 1], points[:, 0])
    phi = np.where(phi < 0.0, phi + _TWO_PI, phi)
    phi = np.where(phi >= _TWO_PI, 0.0, phi)
    theta = np.where(r > 0.0, theta, 0.0)
    phi = np.where(r > 0.0, phi, 0.0)
    return r, theta, phi


def directions_to_vectors(directions: np.ndarray) -> np.ndarray:
    """Unit vectors for an (n, 2) array of (theta, phi) directions."""
    directions = np.asarray(directions, dtype=float).reshape(-1, 2)
    st = np.sin(directions[:, 0])
    return np.column_stack([
        st * np.cos(directions[:, 1]),
        st * np.sin(directions[:, 1]),
        np.cos(directions[:, 0]),
    ])


def roi_radius(max_speed: float, horizon_T: float, r_a: float) -> float:
    """Region-of-interest radius: max travel within the horizon plus r_a."""
    if max_speed < 0 or horizon_T < 0 or r_a < 0:
        raise ValueError("max_speed, horizon_T and r_a must be >= 0")
    return max_speed * horizon_T + r_a


def clamp_to_roi(cloud: PointCloud, r_roi: float) -> PointCloud:
    """Project points beyond the ROI sphere radially onto it."""
    if r_roi <= 0:
        raise ValueError(f"r_roi must be > 0, got {r_roi}")
    pts = cloud.points
    norms = np.linalg.norm(pts, axis=1)
    scale = np.ones_like(norms)
    far = norms > r_roi
    scale[far] = r_roi / norms[far]
    return PointCloud(pts * scale[:, None], cloud.frame_origin.copy())


def erode_by_agent_radius(cloud: PointCloud, r_a: float, eps_r: float) -> PointCloud:
    """Pull each point radially inward by r_a, flooring the norm at eps_r."""
    if r_a < 0:
        raise ValueError(f"r_a must be >= 0, got {r_a}")
    if eps_r <= 0:
        raise ValueError(f"eps_r must be > 0, got {eps_r}")
    pts = cloud.points
    if r_a == 0.0:
        return PointCloud(pts.copy(), cloud.frame_origin.copy())
    norms = np.linalg.norm(pts, axis=1)
    # zero-norm points have no direction; send them to eps_r along +z
    dirs = np.zeros_like(pts)
    nz = norms > 0.0
    dirs[nz] = pts[nz] / norms[nz, None]
    dirs[~nz] = (0.0, 0.0, 1.0)
    new_norms = np.maximum(norms - r_a, eps_r)
    return PointCloud(dirs * new_norms[:, None], cloud.frame_origin.copy())


def fibonacci_directions(n: int) -> np.ndarray:
    """n near-uniform directions from the Fibonacci spiral lattice, (n, 2)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.mod(i * _GOLDEN_ANGLE, _TWO_PI)
    return np.column_stack([theta, phi])
