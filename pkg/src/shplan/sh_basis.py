"""Real spherical-harmonic basis functions and design matrices.

Angle convention: ``theta`` is the colatitude in [0, pi] and ``phi``
the azimuth in [0, 2*pi).  The real orthonormal basis is

    Y_(l,0)  = N(l,0) P_l^0(cos theta)
    Y_(l,m)  = sqrt(2) N(l,m) P_l^m(cos theta) cos(m phi)    (m > 0)
    Y_(l,-m) = sqrt(2) N(l,m) P_l^m(cos theta) sin(m phi)    (m > 0)

with N(l,m) = sqrt((2l+1)(l-m)! / (4 pi (l+m)!)) and the associated
Legendre functions carrying the Condon-Shortley phase.  Coefficients
are stored flat at index j = l*l + l + m.

All Legendre values are produced by upward recurrences with the
normalization folded in, which stays well conditioned over the order
range used here (l <= 16); no factorial ratios are ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Y00",
    "HarmonicIndex",
    "RealSHExpansion",
    "DesignMatrix",
    "flat_index",
    "num_coefficients",
    "assoc_legendre",
    "real_sh",
    "basis_matrix",
    "basis_matrix_with_gradients",
    "design_matrix",
    "eval_radius",
]

#: Value of the constant harmonic, 1 / sqrt(4 pi).
Y00 = math.sqrt(1.0 / (4.0 * math.pi))

_SQRT2 = math.sqrt(2.0)
_ANGLE_SLACK = 1e-9


def flat_index(l: int, m: int) -> int:
    """Flat coefficient index j = l*l + l + m of harmonic (l, m)."""
    if l < 0 or abs(m) > l:
        raise ValueError(f"need 0 <= |m| <= l, got l={l}, m={m}")
    return l * l + l + m


def num_coefficients(max_order: int) -> int:
    """Number of real coefficients for orders 0..max_order inclusive."""
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    return (max_order + 1) ** 2


@dataclass(frozen=True)
class HarmonicIndex:
    """Order / intra-order index pair (l, m) with |m| <= l."""

    l: int
    m: int

    def __post_init__(self) -> None:
        if self.l < 0 or abs(self.m) > self.l:
            raise ValueError(f"need 0 <= |m| <= l, got l={self.l}, m={self.m}")

    @property
    def flat(self) -> int:
        return flat_index(self.l, self.m)

    @classmethod
    def from_flat(cls, j: int) -> "HarmonicIndex":
        if j < 0:
            raise ValueError(f"flat index must be >= 0, got {j}")
        l = math.isqrt(j)
        return cls(l, j - l * l - l)


def assoc_legendre(l: int, m: int, x: float) -> float:
    """Associated Legendre function P_l^m(x), Condon-Shortley phase.

    Upward recurrence in l from the diagonal seed
    P_m^m = (-1)^m (2m-1)!! (1-x^2)^(m/2).
    """
    if l < 0 or m < 0 or m > l:
        raise ValueError(f"need 0 <= m <= l, got l={l}, m={m}")
    if not -1.0 <= x <= 1.0:
        raise ValueError(f"need |x| <= 1, got x={x}")
    s = math.sqrt(max(0.0, 1.0 - x * x))
    p_mm = 1.0
    for k in range(1, m + 1):
        p_mm *= -(2 * k - 1) * s
    if l == m:
        return p_mm
    p_prev, p_cur = p_mm, (2 * m + 1) * x * p_mm
    for k in range(m + 2, l + 1):
        p_prev, p_cur = p_cur, ((2 * k - 1) * x * p_cur - (k + m - 1) * p_prev) / (k - m)
    return p_cur


def _check_angles(theta: np.ndarray, phi: np.ndarray) -> None:
    if np.any(theta < -_ANGLE_SLACK) or np.any(theta > math.pi + _ANGLE_SLACK):
        raise ValueError("theta out of range [0, pi]")
    if np.any(phi < -_ANGLE_SLACK) or np.any(phi > 2.0 * math.pi + _ANGLE_SLACK):
        raise ValueError("phi out of range [0, 2*pi)")


def _legendre_block(max_order: int, cos_t: np.ndarray, sin_t: np.ndarray,
                    derivatives: bool = False):
    """Normalized Legendre kernels Q[l][m] = N(l,m) P_l^m(cos t).

    The 1/sqrt(4 pi) of the spherical normalization is folded in, so
    Y_(l,0) = Q[l][0] directly.  Optionally also returns d/dtheta of
    every kernel, produced by the same recurrences (no pole division).
    """
    L = max_order
    Q = [[None] * (l + 1) for l in range(L + 1)]
    D = [[None] * (l + 1) for l in range(L + 1)] if derivatives else None
    Q[0][0] = np.full_like(cos_t, Y00)
    if derivatives:
        D[0][0] = np.zeros_like(cos_t)
    for m in range(1, L + 1):
        c = math.sqrt((2 * m + 1) / (2.0 * m))
        Q[m][m] = -c * sin_t * Q[m - 1][m - 1]
        if derivatives:
            D[m][m] = -c * (cos_t * Q[m - 1][m - 1] + sin_t * D[m - 1][m - 1])
    for m in range(L):
        c = math.sqrt(2.0 * m + 3.0)
        Q[m + 1][m] = c * cos_t * Q[m][m]
        if derivatives:
            D[m + 1][m] = c * (cos_t * D[m][m] - sin_t * Q[m][m])
    for m in range(max(L - 1, 0)):
        for l in range(m + 2, L + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((2.0 * l + 1.0) * (l + m - 1.0) * (l - m - 1.0))
                          / ((2.0 * l - 3.0) * (l * l - m * m)))
            Q[l][m] = a * cos_t * Q[l - 1][m] - b * Q[l - 2][m]
            if derivatives:
                D[l][m] = (a * (cos_t * D[l - 1][m] - sin_t * Q[l - 1][m])
                           - b * D[l - 2][m])
    return Q, D


def _as_angle_arrays(theta, phi):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if theta.shape != phi.shape or theta.ndim != 1:
        raise ValueError("theta and phi must be matching 1-d arrays")
    _check_angles(theta, phi)
    return theta, phi


def basis_matrix(theta, phi, max_order: int) -> np.ndarray:
    """Real basis values at the given directions, shape (n, (L+1)^2)."""
    theta, phi = _as_angle_arrays(theta, phi)
    k = num_coefficients(max_order)
    Q, _ = _legendre_block(max_order, np.cos(theta), np.sin(theta))
    Y = np.empty((theta.size, k))
    for l in range(max_order + 1):
        Y[:, flat_index(l, 0)] = Q[l][0]
        for m in range(1, l + 1):
            Y[:, flat_index(l, m)] = _SQRT2 * Q[l][m] * np.cos(m * phi)
            Y[:, flat_index(l, -m)] = _SQRT2 * Q[l][m] * np.sin(m * phi)
    return Y


def basis_matrix_with_gradients(theta, phi, max_order: int):
    """Basis values plus d/dtheta and d/dphi, each shaped (n, (L+1)^2)."""
    theta, phi = _as_angle_arrays(theta, phi)
    k = num_coefficients(max_order)
    Q, D = _legendre_block(max_order, np.cos(theta), np.sin(theta), derivatives=True)
    n = theta.size
    Y = np.empty((n, k))
    dY_dt = np.empty((n, k))
    dY_dp = np.zeros((n, k))
    for l in range(max_order + 1):
        j0 = flat_index(l, 0)
        Y[:, j0] = Q[l][0]
        dY_dt[:, j0] = D[l][0]
        for m in range(1, l + 1):
            cos_m, sin_m = np.cos(m * phi), np.sin(m * phi)
            jc, js = flat_index(l, m), flat_index(l, -m)
            Y[:, jc] = _SQRT2 * Q[l][m] * cos_m
            Y[:, js] = _SQRT2 * Q[l][m] * sin_m
            dY_dt[:, jc] = _SQRT2 * D[l][m] * cos_m
            dY_dt[:, js] = _SQRT2 * D[l][m] * sin_m
            dY_dp[:, jc] = -m * _SQRT2 * Q[l][m] * sin_m
            dY_dp[:, js] = m * _SQRT2 * Q[l][m] * cos_m
    return Y, dY_dt, dY_dp


def real_sh(l: int, m: int, theta: float, phi: float) -> float:
    """Real orthonormal spherical harmonic Y_l^m at one direction."""
    if l < 0 or abs(m) > l:
        raise ValueError(f"need 0 <= |m| <= l, got l={l}, m={m}")
    row = basis_matrix(float(theta), float(phi), l)
    return float(row[0, flat_index(l, m)])


@dataclass
class DesignMatrix:
    """Basis evaluations at sampled directions; column j is harmonic j."""

    values: np.ndarray      # (n, K)
    directions: np.ndarray  # (n, 2) rows of (theta, phi)
    max_order: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.directions = np.asarray(self.directions, dtype=float)
        if self.values.shape != (self.directions.shape[0],
                                 num_coefficients(self.max_order)):
            raise ValueError("design matrix shape inconsistent with directions / order")


def design_matrix(directions, max_order: int) -> DesignMatrix:
    """Evaluate the basis at each (theta, phi) direction."""
    dirs = np.asarray(directions, dtype=float)
    if dirs.ndim != 2 or dirs.shape[1] != 2 or dirs.shape[0] == 0:
        raise ValueError("directions must be a non-empty (n, 2) array of (theta, phi)")
    values = basis_matrix(dirs[:, 0], dirs[:, 1], max_order)
    return DesignMatrix(values=values, directions=dirs, max_order=max_order)


@dataclass
class RealSHExpansion:
    """Radius field r(theta, phi) = sum_j weights[j] * Y_j(theta, phi).

    Weights are in meters (each multiplies a dimensionless basis value);
    ``center`` is the world-frame origin of the expansion.
    """

    max_order: int
    weights: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        k = num_coefficients(self.max_order)
        if self.weights.shape != (k,):
            raise ValueError(
                f"expected {k} weights for max_order={self.max_order}, "
                f"got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must all be finite")
        if self.center.shape != (3,) or not np.all(np.isfinite(self.center)):
            raise ValueError("center must be a finite 3-vector")


def eval_radius(expansion: RealSHExpansion, theta: float, phi: float) -> float:
    """Radius of the truncated expansion in direction (theta, phi)."""
    row = basis_matrix(float(theta), float(phi), expansion.max_order)[0]
    return float(expansion.weights @ row)
