"""Penalty joints and the compliant velocity drive.

A joint is a stiff spring-damper rather than an exact constraint, so every
reaction force is an explicit function of the state.

Translational couplings measure the separation ``delta = x_b - x_a`` of two
anchor points with zero rest length. The separation is projected into a
frame ``f`` (the world, or a body frame for a sliding joint) where the
diagonal stiffness and damping act axis by axis. Axes listed in
``free_mask`` carry no effort, which is how a prismatic joint leaves its
sliding axis free. The effort is mapped back with ``R_f`` and applied to ``b``
with opposite sign on ``a``.

Rotational couplings and the drive keep an integrated angle as their spring
state because no configuration-level relative angle exists for them.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
from numba import njit

from qrmsim.body import COND_LIMIT, BodyState, RigidBody, _omega_nb, _point_pos_nb, _point_vel_nb
from qrmsim.errors import SingularInertiaError

GROUND = 0
WORLD = None


@dataclass(frozen=True)
class AnchorRef:
    """A point on a body (body-frame offset from the COM) or, for GROUND, a fixed world point."""

    body: int
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        off = tuple(float(c) for c in self.offset)
        if len(off) != 3 or not all(np.isfinite(off)):
            raise ValueError(f"anchor offset must be 3 finite numbers, got {self.offset!r}")
        object.__setattr__(self, "offset", off)


def _diag3(values, what):
    arr = np.asarray(values, dtype=float)
    if arr.shape == (3, 3):
        if np.any(arr != np.diag(np.diag(arr))):
            raise ValueError(f"{what} must be diagonal")
        arr = np.diag(arr)
    elif arr.shape == ():
        arr = np.full(3, float(arr))
    arr = arr.reshape(3)
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} entries must be finite and non-negative")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class TranslationalCoupling:
    """Spring-damper between two anchors.

    ``stiffness`` and ``damping`` are the diagonals of K (N/m) and D (N*s/m) in
    the projection frame. ``frame`` is ``None`` for the world frame or a body
    id. When the frame is body ``a``'s own frame (a sliding joint) the reaction
    on ``a`` acts at the current contact point, the world position of ``b``'s
    anchor.
    """

    name: str
    a: AnchorRef
    b: AnchorRef
    stiffness: tuple[float, float, float]
    damping: tuple[float, float, float]
    frame: int | None = WORLD
    free_mask: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        k = _diag3(self.stiffness, f"{self.name}: stiffness")
        d = _diag3(self.damping, f"{self.name}: damping")
        mask = tuple(bool(m) for m in self.free_mask)
        if len(mask) != 3:
            raise ValueError(f"{self.name}: free_mask needs 3 entries")
        for axis, free in enumerate(mask):
            if free and (k[axis] != 0.0 or d[axis] != 0.0):
                raise ValueError(
                    f"{self.name}: free axis {axis + 1} must have zero stiffness and damping"
                )
        if self.frame is not None and self.frame == GROUND:
            raise ValueError(f"{self.name}: use frame=None for the world frame")
        if self.a.body == self.b.body:
            raise ValueError(f"{self.name}: a coupling needs two distinct bodies")
        object.__setattr__(self, "stiffness", k)
        object.__setattr__(self, "damping", d)
        object.__setattr__(self, "free_mask", mask)

    @property
    def K(self) -> np.ndarray:
        return np.diag(self.stiffness)

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.damping)

    @classmethod
    def pin(cls, name, a, b, stiffness, damping):
        return cls(name, a, b, (stiffness,) * 3, (damping,) * 3)


@dataclass(frozen=True)
class RotationalCoupling:
    """Torsional spring-damper locking the relative rotation of two bodies."""

    name: str
    a: int
    b: int
    stiffness: float
    damping: float

    def __post_init__(self):
        if not (self.stiffness >= 0.0 and self.damping >= 0.0):
            raise ValueError(f"{self.name}: stiffness and damping must be non-negative")
        if self.a == self.b or GROUND in (self.a, self.b):
            raise ValueError(f"{self.name}: needs two distinct moving bodies")


@dataclass(frozen=True)
class VelocityDriver:
    """Angular velocity source acting through a torsional spring-damper."""

    body: int
    axis: tuple[float, float, float]
    rate: float
    K_C: float
    R_C: float

    def __post_init__(self):
        ax = tuple(float(c) for c in self.axis)
        if len(ax) != 3 or abs(np.linalg.norm(ax) - 1.0) > 1e-12:
            raise ValueError(f"driver axis must be a unit vector, got {self.axis!r}")
        if not (self.K_C >= 0.0 and self.R_C >= 0.0):
            raise ValueError("driver K_C and R_C must be non-negative")
        if not np.isfinite(self.rate):
            raise ValueError("driver rate must be finite")
        object.__setattr__(self, "axis", ax)


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque_about_com: np.ndarray
    application_point: np.ndarray


# ---------------------------------------------------------------- kernels


_JIT = dict(cache=True, inline="always", error_model="numpy")


@njit(**_JIT)
def _trans_nb(y, ba, bb, bf, ma, mb, W, ia, ib, jf, off_a, off_b, k, d, free, j, out):
    """Evaluate translational coupling ``j``.

    ``ba``/``bb``/``bf`` are block offsets into ``y`` and ``ia``/``ib``/``jf``
    rows of the angular velocity table ``W`` (-1 = ground/world). Rows of
    ``out[j]``: force on b, application point on a, application point on b,
    deflection in frame f, deflection rate in frame f. Returns the force on b.
    """
    wa0 = wa1 = wa2 = 0.0
    if ia >= 0:
        wa0, wa1, wa2 = W[ia, 0], W[ia, 1], W[ia, 2]
    wb0 = wb1 = wb2 = 0.0
    if ib >= 0:
        wb0, wb1, wb2 = W[ib, 0], W[ib, 1], W[ib, 2]
    a0, a1, a2 = off_a[j, 0], off_a[j, 1], off_a[j, 2]
    c0, c1, c2 = off_b[j, 0], off_b[j, 1], off_b[j, 2]
    pa0, pa1, pa2 = _point_pos_nb(y, ba, a0, a1, a2)
    pb0, pb1, pb2 = _point_pos_nb(y, bb, c0, c1, c2)
    va0, va1, va2 = _point_vel_nb(y, ba, ma, wa0, wa1, wa2, a0, a1, a2)
    vb0, vb1, vb2 = _point_vel_nb(y, bb, mb, wb0, wb1, wb2, c0, c1, c2)
    d0 = pb0 - pa0
    d1 = pb1 - pa1
    d2 = pb2 - pa2
    v0 = vb0 - va0
    v1 = vb1 - va1
    v2 = vb2 - va2
    if bf < 0:
        df0, df1, df2 = d0, d1, d2
        vf0, vf1, vf2 = v0, v1, v2
    else:
        # rate of R_f^T delta: subtract the frame's own rotation of delta
        wf0, wf1, wf2 = W[jf, 0], W[jf, 1], W[jf, 2]
        v0 -= wf1 * d2 - wf2 * d1
        v1 -= wf2 * d0 - wf0 * d2
        v2 -= wf0 * d1 - wf1 * d0
        r = bf + 3
        df0 = y[r] * d0 + y[r + 3] * d1 + y[r + 6] * d2
        df1 = y[r + 1] * d0 + y[r + 4] * d1 + y[r + 7] * d2
        df2 = y[r + 2] * d0 + y[r + 5] * d1 + y[r + 8] * d2
        vf0 = y[r] * v0 + y[r + 3] * v1 + y[r + 6] * v2
        vf1 = y[r + 1] * v0 + y[r + 4] * v1 + y[r + 7] * v2
        vf2 = y[r + 2] * v0 + y[r + 5] * v1 + y[r + 8] * v2
    e0 = 0.0 if free[j, 0] else k[j, 0] * df0 + d[j, 0] * vf0
    e1 = 0.0 if free[j, 1] else k[j, 1] * df1 + d[j, 1] * vf1
    e2 = 0.0 if free[j, 2] else k[j, 2] * df2 + d[j, 2] * vf2
    if bf < 0:
        f0, f1, f2 = -e0, -e1, -e2
    else:
        r = bf + 3
        f0 = -(y[r] * e0 + y[r + 1] * e1 + y[r + 2] * e2)
        f1 = -(y[r + 3] * e0 + y[r + 4] * e1 + y[r + 5] * e2)
        f2 = -(y[r + 6] * e0 + y[r + 7] * e1 + y[r + 8] * e2)
    if bf >= 0 and bf == ba:
        pa0, pa1, pa2 = pb0, pb1, pb2
    out[j, 0, 0] = f0
    out[j, 0, 1] = f1
    out[j, 0, 2] = f2
    out[j, 1, 0] = pa0
    out[j, 1, 1] = pa1
    out[j, 1, 2] = pa2
    out[j, 2, 0] = pb0
    out[j, 2, 1] = pb1
    out[j, 2, 2] = pb2
    out[j, 3, 0] = df0
    out[j, 3, 1] = df1
    out[j, 3, 2] = df2
    out[j, 4, 0] = vf0
    out[j, 4, 1] = vf1
    out[j, 4, 2] = vf2
    return f0, f1, f2


@njit(**_JIT)
def _rot_nb(wa, wb, theta, k, d):
    """Couple on ``a`` (b gets the negative) and the spring-angle rate, per axis."""
    rel = wb - wa
    return k * theta + d * rel, rel


@njit(**_JIT)
def _drive_nb(w0, w1, w2, axis, rate, kc, rc, theta_err):
    """Return ``(T_c, slip)``; the couple on the driven body is ``T_c * axis``."""
    slip = rate - (w0 * axis[0] + w1 * axis[1] + w2 * axis[2])
    return kc * theta_err + rc * slip, slip


# ---------------------------------------------------------------- public API


def _local_blocks(ids, states, bodies):
    """Pack the named bodies into a scratch flat array; return (y, row map, omega table)."""
    ids = [i for i in dict.fromkeys(ids) if i not in (GROUND, -1)]
    y = np.concatenate([states[i].to_block() for i in ids]) if ids else np.zeros(0)
    row = {GROUND: -1, -1: -1}
    W = np.zeros((max(len(ids), 1), 3))
    for n, i in enumerate(ids):
        row[i] = n
        Ib = np.ascontiguousarray(bodies[i].inertia_body, dtype=float).reshape(1, 3, 3)
        *w, cond = _omega_nb(y, 18 * n, Ib, 0)
        if not cond <= COND_LIMIT:
            raise SingularInertiaError(f"body {i}: world inertia is singular")
        W[n] = w
    return y, row, W


def _eval_translational(c: TranslationalCoupling, states, bodies):
    frame = -1 if c.frame is None else c.frame
    y, row, W = _local_blocks([c.a.body, c.b.body, frame], states, bodies)
    mass = {GROUND: 1.0, **{i: bodies[i].mass for i in row if i not in (GROUND, -1)}}
    ia, ib, jf = row[c.a.body], row[c.b.body], row[frame]
    out = np.zeros((1, 5, 3))
    _trans_nb(
        y,
        18 * ia if ia >= 0 else -1,
        18 * ib if ib >= 0 else -1,
        18 * jf if jf >= 0 else -1,
        mass[c.a.body],
        mass[c.b.body],
        W,
        ia,
        ib,
        jf,
        np.array([c.a.offset]),
        np.array([c.b.offset]),
        np.array([c.stiffness]),
        np.array([c.damping]),
        np.array([c.free_mask]),
        0,
        out,
    )
    return out[0]


def translational_wrench(
    c: TranslationalCoupling,
    states: Mapping[int, BodyState],
    bodies: Mapping[int, RigidBody],
) -> tuple[Wrench, Wrench]:
    """Wrenches exerted by coupling ``c`` on its ``a`` and ``b`` bodies.

    Torques are about each body's COM. For a GROUND side the torque is taken
    about the world origin.
    """
    out = _eval_translational(c, states, bodies)
    fb = out[0].copy()
    fa = -fb
    result = []
    for ref, force, point in ((c.a, fa, out[1].copy()), (c.b, fb, out[2].copy())):
        origin = np.zeros(3) if ref.body == GROUND else states[ref.body].r_com
        result.append(Wrench(force, np.cross(point - origin, force), point))
    return result[0], result[1]


def translational_deflection(c: TranslationalCoupling, states, bodies):
    """Deflection and deflection rate in the coupling's projection frame."""
    out = _eval_translational(c, states, bodies)
    return out[3].copy(), out[4].copy()


def rotational_torque(
    c: RotationalCoupling,
    theta,
    states: Mapping[int, BodyState],
    bodies: Mapping[int, RigidBody],
):
    """Return ``(couple on a, couple on b, theta_rate)`` for spring angle ``theta``."""
    _, row, W = _local_blocks([c.a, c.b], states, bodies)
    theta = np.asarray(theta, dtype=float).reshape(3)
    tau = np.empty(3)
    rate = np.empty(3)
    for i in range(3):
        tau[i], rate[i] = _rot_nb(W[row[c.a], i], W[row[c.b], i], theta[i], c.stiffness, c.damping)
    return tau, -tau, rate


def driver_torque(d: VelocityDriver, theta_err: float, state: BodyState, body: RigidBody):
    """Return ``(couple on the driven body, theta_err rate, T_c)``."""
    _, _, W = _local_blocks([body.id], {body.id: state}, {body.id: body})
    w0, w1, w2 = W[0]
    tc, slip = _drive_nb(w0, w1, w2, np.asarray(d.axis), d.rate, d.K_C, d.R_C, float(theta_err))
    return tc * np.asarray(d.axis), slip, tc
