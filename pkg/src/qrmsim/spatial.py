"""Small 3-D vector and rotation helpers.

Vectors are ``(3,)`` float arrays and matrices ``(3, 3)`` arrays in row-major
order. A rotation's columns are the unit vectors of a body frame expressed in
the world frame.

The ``_nb`` functions are numba kernels shared with the integrator; they work
on flat row-major 9-blocks inside a larger state array so the hot loop never
allocates.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from qrmsim.errors import OrientationError

# Newton-Schulz stops once max|R^T R - I| drops to this level.
_POLAR_TOL = 4.0e-16
_POLAR_MAX_ITER = 12
# Beyond this defect the iteration is not trusted (integrator blow-up).
_POLAR_GIVE_UP = 0.1

ORTHO_INPUT_TOL = 1.0e-2
PLANAR_AXIS_TOL = 1.0e-3


def skew(v) -> np.ndarray:
    """Return ``S`` with ``S @ w == np.cross(v, w)``."""
    x, y, z = (float(c) for c in np.asarray(v, dtype=float).reshape(3))
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormality_defect(R) -> float:
    R = np.asarray(R, dtype=float)
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


@njit(cache=True)
def _polar_nb(y, base, X, E):
    """Project the row-major 9-block ``y[base:base+9]`` onto the nearest rotation.

    Newton-Schulz iteration ``X <- X (I - E/2)`` with ``E = X^T X - I``. It uses
    only products and sums, so exact zeros in a planar rotation stay exact.
    Returns the number of iterations, or -1 if the input is too far from
    orthonormal for the iteration to be trusted. ``X`` and ``E`` are 3x3
    scratch arrays.
    """
    for i in range(3):
        for j in range(3):
            X[i, j] = y[base + 3 * i + j]
    it = 0
    while True:
        emax = 0.0
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += X[k, i] * X[k, j]
                if i == j:
                    acc -= 1.0
                E[i, j] = acc
                a = abs(acc)
                if a > emax:
                    emax = a
        if not emax <= _POLAR_GIVE_UP:
            return -1
        if emax <= _POLAR_TOL or it >= _POLAR_MAX_ITER:
            break
        for i in range(3):
            r0 = X[i, 0]
            r1 = X[i, 1]
            r2 = X[i, 2]
            for j in range(3):
                X[i, j] -= 0.5 * (r0 * E[0, j] + r1 * E[1, j] + r2 * E[2, j])
        it += 1
    det = (
        X[0, 0] * (X[1, 1] * X[2, 2] - X[1, 2] * X[2, 1])
        - X[0, 1] * (X[1, 0] * X[2, 2] - X[1, 2] * X[2, 0])
        + X[0, 2] * (X[1, 0] * X[2, 1] - X[1, 1] * X[2, 0])
    )
    if det <= 0.0:
        return -1
    for i in range(3):
        for j in range(3):
            y[base + 3 * i + j] = X[i, j]
    return it


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation to ``R`` (orthogonal polar factor).

    The polar factor minimizes the Frobenius distance to ``R`` over all
    rotations and treats the three columns symmetrically. Raises
    :class:`OrientationError` when ``R`` is more than ``1e-2`` (max-norm) from
    that rotation or has negative determinant.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise OrientationError("expected a finite 3x3 matrix")
    buf = R.reshape(9).copy()
    if _polar_nb(buf, 0, np.empty((3, 3)), np.empty((3, 3))) < 0:
        raise OrientationError(
            f"matrix is not close to a rotation (defect {orthonormality_defect(R):.3g})"
        )
    Q = buf.reshape(3, 3)
    dist = float(np.max(np.abs(Q - R)))
    if dist > ORTHO_INPUT_TOL:
        raise OrientationError(
            f"matrix is {dist:.3g} from the nearest rotation (limit {ORTHO_INPUT_TOL})"
        )
    return Q


def angle_about_z(R) -> float:
    """Heading of a planar rotation, in ``(-pi, pi]``."""
    R = np.asarray(R, dtype=float)
    if np.max(np.abs(R[:, 2] - (0.0, 0.0, 1.0))) > PLANAR_AXIS_TOL:
        raise OrientationError("rotation axis is not the world z axis")
    a = math.atan2(R[1, 0], R[0, 0])
    return math.pi if a == -math.pi else a


def unwrap_angles(angles) -> np.ndarray:
    """Cumulative angle channel without the 2*pi jumps of the principal value."""
    return np.unwrap(np.asarray(angles, dtype=float))
