"""Rigid links and their dynamic state.

Each body carries its translational momentum ``p`` and its angular momentum
``L`` about the centre of mass, both in world coordinates. Angular velocity is
recovered from ``L`` through the world-frame inertia ``R @ I_body @ R.T``, so
Euler's equations reduce to ``dL/dt = sum of torques`` with no explicit
gyroscopic term.

Inside the integrator a body occupies an 18-slot block of the flat state::

    [r_com(3), R(9, row-major), p(3), L(3)]

and the ``_nb`` kernels below read directly from such a block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from qrmsim.errors import SingularInertiaError

BLOCK = 18
R_OFF = 3
P_OFF = 12
L_OFF = 15

COND_LIMIT = 1.0e12


@dataclass(frozen=True)
class RigidBody:
    """Constant properties of one link.

    ``attachments`` maps a point label (``"O1"``, ``"A"``, ...) to its offset
    from the centre of mass in body coordinates.
    """

    id: int
    mass: float
    inertia_body: np.ndarray
    attachments: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if not self.mass > 0.0:
            raise ValueError(f"body {self.id}: mass must be positive, got {self.mass}")
        I = np.array(self.inertia_body, dtype=float)
        if I.shape != (3, 3) or not np.all(np.isfinite(I)):
            raise ValueError(f"body {self.id}: inertia must be a finite 3x3 matrix")
        if np.max(np.abs(I - I.T)) > 1e-12 * max(1.0, np.max(np.abs(I))):
            raise ValueError(f"body {self.id}: inertia is not symmetric")
        if np.min(np.linalg.eigvalsh(I)) <= 0.0:
            raise ValueError(f"body {self.id}: inertia is not positive-definite")
        I.setflags(write=False)
        object.__setattr__(self, "inertia_body", I)
        pts = {}
        for label, off in self.attachments.items():
            v = np.array(off, dtype=float).reshape(3)
            v.setflags(write=False)
            pts[label] = v
        object.__setattr__(self, "attachments", pts)

    def offset(self, label: str) -> np.ndarray:
        return self.attachments[label]


@dataclass
class BodyState:
    r_com: np.ndarray
    R: np.ndarray
    p: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        self.r_com = np.array(self.r_com, dtype=float).reshape(3)
        self.R = np.array(self.R, dtype=float).reshape(3, 3)
        self.p = np.array(self.p, dtype=float).reshape(3)
        self.L = np.array(self.L, dtype=float).reshape(3)

    @classmethod
    def at_rest(cls, r_com, R) -> "BodyState":
        return cls(r_com, R, np.zeros(3), np.zeros(3))

    def to_block(self) -> np.ndarray:
        return np.concatenate([self.r_com, self.R.reshape(9), self.p, self.L])

    @classmethod
    def from_block(cls, block) -> "BodyState":
        b = np.asarray(block, dtype=float)
        return cls(b[0:3], b[3:12].reshape(3, 3), b[12:15], b[15:18])

    def __eq__(self, other):
        if not isinstance(other, BodyState):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("r_com", "R", "p", "L")
        )


def box_inertia(mass: float, lx: float, ly: float, lz: float) -> np.ndarray:
    """Inertia of a uniform cuboid about its centre, axes along the edges."""
    for name, v in (("mass", mass), ("lx", lx), ("ly", ly), ("lz", lz)):
        if not v > 0.0:
            raise ValueError(f"{name} must be positive, got {v}")
    return np.diag(
        [
            mass * (ly * ly + lz * lz) / 12.0,
            mass * (lx * lx + lz * lz) / 12.0,
            mass * (lx * lx + ly * ly) / 12.0,
        ]
    )


def world_inertia(R, inertia_body) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return R @ np.asarray(inertia_body, dtype=float) @ R.T


_JIT = dict(cache=True, inline="always", error_model="numpy")


@njit(**_JIT)
def _omega_nb(y, base, Ib, n):
    """Angular velocity of the body block at ``base``: ``(w0, w1, w2, cond)``.

    ``Ib[n]`` is the body-frame inertia (``Ib`` is a stack of 3x3 matrices).

    Solves ``(R Ib R^T) w = L`` with the adjugate formula. ``cond`` is a
    Frobenius condition estimate (an upper bound on the 2-norm condition
    number), ``inf`` when the world inertia is not invertible.
    """
    r = base + R_OFF
    r00, r01, r02 = y[r], y[r + 1], y[r + 2]
    r10, r11, r12 = y[r + 3], y[r + 4], y[r + 5]
    r20, r21, r22 = y[r + 6], y[r + 7], y[r + 8]
    # M = R Ib
    m00 = r00 * Ib[n, 0, 0] + r01 * Ib[n, 1, 0] + r02 * Ib[n, 2, 0]
    m01 = r00 * Ib[n, 0, 1] + r01 * Ib[n, 1, 1] + r02 * Ib[n, 2, 1]
    m02 = r00 * Ib[n, 0, 2] + r01 * Ib[n, 1, 2] + r02 * Ib[n, 2, 2]
    m10 = r10 * Ib[n, 0, 0] + r11 * Ib[n, 1, 0] + r12 * Ib[n, 2, 0]
    m11 = r10 * Ib[n, 0, 1] + r11 * Ib[n, 1, 1] + r12 * Ib[n, 2, 1]
    m12 = r10 * Ib[n, 0, 2] + r11 * Ib[n, 1, 2] + r12 * Ib[n, 2, 2]
    m20 = r20 * Ib[n, 0, 0] + r21 * Ib[n, 1, 0] + r22 * Ib[n, 2, 0]
    m21 = r20 * Ib[n, 0, 1] + r21 * Ib[n, 1, 1] + r22 * Ib[n, 2, 1]
    m22 = r20 * Ib[n, 0, 2] + r21 * Ib[n, 1, 2] + r22 * Ib[n, 2, 2]
    # A = M R^T
    a00 = m00 * r00 + m01 * r01 + m02 * r02
    a01 = m00 * r10 + m01 * r11 + m02 * r12
    a02 = m00 * r20 + m01 * r21 + m02 * r22
    a10 = m10 * r00 + m11 * r01 + m12 * r02
    a11 = m10 * r10 + m11 * r11 + m12 * r12
    a12 = m10 * r20 + m11 * r21 + m12 * r22
    a20 = m20 * r00 + m21 * r01 + m22 * r02
    a21 = m20 * r10 + m21 * r11 + m22 * r12
    a22 = m20 * r20 + m21 * r21 + m22 * r22
    c00 = a11 * a22 - a12 * a21
    c01 = a12 * a20 - a10 * a22
    c02 = a10 * a21 - a11 * a20
    det = a00 * c00 + a01 * c01 + a02 * c02
    if not (det > 0.0 and np.isfinite(det)):
        return 0.0, 0.0, 0.0, np.inf
    c10 = a02 * a21 - a01 * a22
    c11 = a00 * a22 - a02 * a20
    c12 = a01 * a20 - a00 * a21
    c20 = a01 * a12 - a02 * a11
    c21 = a02 * a10 - a00 * a12
    c22 = a00 * a11 - a01 * a10
    inv_det = 1.0 / det
    l0 = y[base + L_OFF]
    l1 = y[base + L_OFF + 1]
    l2 = y[base + L_OFF + 2]
    # inverse = adjugate / det, adjugate = cofactor^T
    w0 = (c00 * l0 + c10 * l1 + c20 * l2) * inv_det
    w1 = (c01 * l0 + c11 * l1 + c21 * l2) * inv_det
    w2 = (c02 * l0 + c12 * l1 + c22 * l2) * inv_det
    ni = (c00 * c00 + c01 * c01 + c02 * c02 + c10 * c10 + c11 * c11 + c12 * c12
          + c20 * c20 + c21 * c21 + c22 * c22)
    na = (a00 * a00 + a01 * a01 + a02 * a02 + a10 * a10 + a11 * a11 + a12 * a12
          + a20 * a20 + a21 * a21 + a22 * a22)
    return w0, w1, w2, np.sqrt(na * ni) * abs(inv_det)


@njit(**_JIT)
def _point_pos_nb(y, base, o0, o1, o2):
    """World position of body-frame offset ``o``; ``base < 0`` is ground (``o`` is world)."""
    if base < 0:
        return o0, o1, o2
    r = base + R_OFF
    return (
        y[base] + (y[r] * o0 + y[r + 1] * o1 + y[r + 2] * o2),
        y[base + 1] + (y[r + 3] * o0 + y[r + 4] * o1 + y[r + 5] * o2),
        y[base + 2] + (y[r + 6] * o0 + y[r + 7] * o1 + y[r + 8] * o2),
    )


@njit(**_JIT)
def _point_vel_nb(y, base, mass, w0, w1, w2, o0, o1, o2):
    """World velocity ``p/m + w x (R o)`` of a body point; zero for ground."""
    if base < 0:
        return 0.0, 0.0, 0.0
    r = base + R_OFF
    a0 = y[r] * o0 + y[r + 1] * o1 + y[r + 2] * o2
    a1 = y[r + 3] * o0 + y[r + 4] * o1 + y[r + 5] * o2
    a2 = y[r + 6] * o0 + y[r + 7] * o1 + y[r + 8] * o2
    p = base + P_OFF
    return (
        y[p] / mass + (w1 * a2 - w2 * a1),
        y[p + 1] / mass + (w2 * a0 - w0 * a2),
        y[p + 2] / mass + (w0 * a1 - w1 * a0),
    )


def omega_from_state(state: BodyState, inertia_body) -> np.ndarray:
    """Angular velocity from angular momentum, ``(R I_b R^T)^-1 L``."""
    *w, cond = _omega_nb(
        state.to_block(), 0, np.ascontiguousarray(inertia_body, dtype=float).reshape(1, 3, 3), 0
    )
    if not cond <= COND_LIMIT:
        raise SingularInertiaError(f"world inertia is singular (condition estimate {cond:.3g})")
    return np.array(w)


def point_position(state: BodyState, offset) -> np.ndarray:
    o = np.asarray(offset, dtype=float).reshape(3)
    return np.array(_point_pos_nb(state.to_block(), 0, o[0], o[1], o[2]))


def point_velocity(state: BodyState, body: RigidBody, offset) -> np.ndarray:
    """Velocity of the material point at body-frame ``offset``."""
    w = omega_from_state(state, body.inertia_body)
    o = np.asarray(offset, dtype=float).reshape(3)
    return np.array(
        _point_vel_nb(state.to_block(), 0, body.mass, w[0], w[1], w[2], o[0], o[1], o[2])
    )
