"""Rotation-group algebra on 3x3 matrices.

Skew maps, the closed-form exponential, vectorized-state conversions,
nearest-rotation projection and attitude error metrics. Everything here is a
pure function of its arguments; no shared state.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

# Tolerance table. Rotation validity sits one order above double-precision
# accumulation over ~1e6 filter steps.
ROTATION_TOL = 1e-9
SMALL_ANGLE_THRESHOLD = 1e-6
SVD_RANK_RTOL = 1e-12
SVD_TIE_RTOL = 1e-12

_I3 = np.eye(3)


def skew(v) -> np.ndarray:
    """Return the antisymmetric matrix S with S @ w = cross(v, w).

    Parameters
    ----------
    v : array_like, shape (3,)

    Returns
    -------
    ndarray, shape (3, 3)
    """
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def exp_so3(v) -> np.ndarray:
    """Closed-form matrix exponential of skew(v).

    Uses the two-coefficient closed form (entries written out analytically,
    using skew(v)^2 = v v^T - |v|^2 I); below ``SMALL_ANGLE_THRESHOLD``
    both coefficients switch to their second-order Taylor expansions
    (sin t / t ~ 1 - t^2/6, (1 - cos t)/t^2 ~ 1/2 - t^2/24) so the zero-angle
    case is exact and the switch is continuous to ~1e-12.

    Parameters
    ----------
    v : array_like, shape (3,)
        Rotation vector (axis * angle), radians.

    Returns
    -------
    ndarray, shape (3, 3)
        Proper rotation matrix.
    """
    x, y, z = np.asarray(v, dtype=float)
    th2 = x * x + y * y + z * z
    if th2 < SMALL_ANGLE_THRESHOLD * SMALL_ANGLE_THRESHOLD:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        th = math.sqrt(th2)
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / th2
    ax, ay, az = a * x, a * y, a * z
    bxy, byz, bxz = b * x * y, b * y * z, b * x * z
    return np.array([
        [1.0 - b * (y * y + z * z), bxy - az, bxz + ay],
        [bxy + az, 1.0 - b * (x * x + z * z), byz - ax],
        [bxz - ay, byz + ax, 1.0 - b * (x * x + y * y)],
    ])


def is_rotation(mat, tol: float = ROTATION_TOL) -> bool:
    """True when mat is orthonormal with determinant +1 within tol."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (3, 3) or not np.all(np.isfinite(mat)):
        return False
    ortho = np.linalg.norm(mat.T @ mat - _I3)
    return ortho <= tol and abs(_det3(mat) - 1.0) <= tol


def vec_transpose(rotation) -> np.ndarray:
    """Stack the columns of R^T (equivalently the rows of R) into a 9-vector."""
    return np.asarray(rotation, dtype=float).reshape(9).copy()


def state_to_matrix(state) -> np.ndarray:
    """Inverse of :func:`vec_transpose`.

    Returns the 3x3 matrix whose transpose has the state's 3-blocks as
    columns. Not necessarily orthonormal; degenerate input (e.g. all zeros)
    passes through for the caller to handle.
    """
    return np.asarray(state, dtype=float).reshape(3, 3).copy()


class ProjectionResult(NamedTuple):
    """Nearest rotation to a 3x3 matrix, plus conditioning flags."""

    rotation: np.ndarray
    degenerate: bool  # input rank < 3; dominant subspace completed arbitrarily
    ambiguous: bool   # tied smallest singular values with negative correction


def project_to_so3(mat) -> ProjectionResult:
    """Frobenius-nearest rotation via SVD with determinant correction.

    Decomposes ``mat = U S V^T`` and returns ``U diag(1, 1, det(UV^T)) V^T``.
    When the two smallest singular values tie and the correction is negative
    the minimizer is not unique; a valid one is returned with ``ambiguous``
    set. When ``mat`` is rank deficient (smallest singular value below
    ``SVD_RANK_RTOL`` relative to the largest) the dominant singular subspace
    is completed to a valid rotation and ``degenerate`` is set.

    Parameters
    ----------
    mat : array_like, shape (3, 3)

    Returns
    -------
    ProjectionResult
    """
    mat = np.asarray(mat, dtype=float)
    u, s, vt = np.linalg.svd(mat)
    d = _det3(u) * _det3(vt)
    rotation = (u * np.array([1.0, 1.0, d])) @ vt
    degenerate = bool(s[2] < SVD_RANK_RTOL * max(s[0], np.finfo(float).tiny))
    ambiguous = bool(d < 0.0 and (s[1] - s[2]) <= SVD_TIE_RTOL * max(s[0], 1.0))
    return ProjectionResult(rotation, degenerate, ambiguous)


def attitude_error_angle(rotation, rotation_est) -> float:
    """Geodesic angle in [0, pi] between two rotations.

    Equals arccos((trace(R^T R_est) - 1) / 2) with the argument clamped to
    [-1, 1], evaluated through the chordal identity
    |R - R_est|_F = 2 sqrt(2) sin(angle / 2), which resolves angles below
    the ~1e-8 noise floor of the arccos form.
    """
    diff = np.asarray(rotation_est, dtype=float) - np.asarray(rotation, dtype=float)
    half_chord = math.sqrt(float(np.einsum("ij,ij->", diff, diff))) / (2.0 * math.sqrt(2.0))
    return 2.0 * math.asin(min(1.0, half_chord))


def _det3(m) -> float:
    return float(
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )
