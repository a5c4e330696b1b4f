"""Assembled mechanism, its flat state, and the state derivative.

The derivative, the probe channels and the energy audit all come out of one
compiled evaluation (``_evaluate_nb``), so a logged reaction force is exactly
the force that entered the momentum balance at that state.

Flat state layout, bodies in ascending id order::

    per body:  r_com(3) R(9, row-major) p(3) L(3)
    per rotational coupling: theta(3)
    driver: theta_err(1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from qrmsim.body import BLOCK, COND_LIMIT, BodyState, RigidBody, _omega_nb
from qrmsim.couplings import (
    GROUND,
    RotationalCoupling,
    TranslationalCoupling,
    VelocityDriver,
    _drive_nb,
    _rot_nb,
    _trans_nb,
)
from qrmsim.errors import BlowUpError, SingularInertiaError
from qrmsim.spatial import angle_about_z

FORCE_LIMIT = 1.0e9

# energy / scalar output slots of _evaluate_nb
E_KE, E_PE, E_PIN, E_PDISS, E_TC = range(5)


@dataclass
class SystemState:
    bodies: dict[int, BodyState]
    theta: list[np.ndarray]
    theta_err: float
    t: float = 0.0

    def __post_init__(self):
        self.bodies = {k: self.bodies[k] for k in sorted(self.bodies)}
        self.theta = [np.array(th, dtype=float).reshape(3) for th in self.theta]
        self.theta_err = float(self.theta_err)
        self.t = float(self.t)

    def __eq__(self, other):
        if not isinstance(other, SystemState):
            return NotImplemented
        return (
            self.bodies == other.bodies
            and len(self.theta) == len(other.theta)
            and all(np.array_equal(a, b) for a, b in zip(self.theta, other.theta))
            and self.theta_err == other.theta_err
            and self.t == other.t
        )


@dataclass(frozen=True)
class ProbeMap:
    """Which bodies and couplings feed the named probe channels."""

    crank: int = 1
    slider: int = 2
    rocker: int = 3
    rod: int = 4
    slider2: int = 5
    pin_o1: str = "O1"
    pin_a: str = "A"
    pin_o3: str = "O3"
    pin_c5: str = "C5"


@dataclass
class ProbeRecord:
    """Logged channels at one instant.

    Every force is the force exerted ON the named link BY its coupling, in
    world coordinates.
    """

    t: float
    crank_angle: float
    crank_angle_unwrapped: float
    w1: np.ndarray
    L1: np.ndarray
    F_O1: np.ndarray
    T_c: float
    F_A2: np.ndarray
    r_C3: np.ndarray
    p3: np.ndarray
    F_O3: np.ndarray
    r_C5: np.ndarray
    p5: np.ndarray
    F_C5: np.ndarray
    R1: np.ndarray
    R4: np.ndarray

    def row(self) -> list[float]:
        """Values in CSV column order."""
        v = [self.t, self.crank_angle, self.crank_angle_unwrapped, self.w1[2]]
        for arr in (self.L1, self.F_O1):
            v.extend(arr)
        v.append(self.T_c)
        for arr in (self.F_A2, self.r_C3, self.p3, self.F_O3, self.r_C5, self.p5, self.F_C5):
            v.extend(arr)
        v.extend(self.R1.reshape(9))
        v.extend(self.R4.reshape(9))
        return [float(x) for x in v]


def _xyz(prefix, unit, note=""):
    return [(f"{prefix}{c}", unit, note) for c in "xyz"]


_ON = "force on the named link by its coupling, world frame"
CHANNELS: list[tuple[str, str, str]] = [
    ("t", "s", "simulation time"),
    ("crank_angle", "rad", "crank heading, principal value in (-pi, pi]"),
    ("crank_angle_unwrapped", "rad", "cumulative crank heading"),
    ("w1z", "rad/s", "crank angular velocity about world z"),
    *_xyz("L1", "kg*m^2/s", "crank angular momentum about its COM"),
    *_xyz("FO1", "N", _ON + " (pin O1 on the crank)"),
    ("Tc", "N*m", "drive torque on the crank about z"),
    *_xyz("FA2", "N", _ON + " (pin A on the slider, link 2)"),
    *_xyz("rC3", "m", "rocker COM position"),
    *_xyz("p3", "kg*m/s", "rocker translational momentum"),
    *_xyz("FO3", "N", _ON + " (pin O3 on the rocker)"),
    *_xyz("rC5", "m", "slider-2 COM position"),
    *_xyz("p5", "kg*m/s", "slider-2 translational momentum"),
    *_xyz("FC5", "N", _ON + " (rod pin at C5 on slider 2)"),
    *[(f"R1_{i}{j}", "1", "crank orientation entry") for i in range(3) for j in range(3)],
    *[(f"R4_{i}{j}", "1", "connecting-rod orientation entry") for i in range(3) for j in range(3)],
]
COLUMNS = [c[0] for c in CHANNELS]


@njit(cache=True)
def _evaluate_nb(
    y,
    masses,
    inertia,
    gravity,
    tc_ia,
    tc_ib,
    tc_if,
    tc_ma,
    tc_mb,
    off_a,
    off_b,
    tc_k,
    tc_d,
    tc_free,
    rc_ia,
    rc_ib,
    rc_k,
    rc_d,
    drv_i,
    drv_axis,
    drv_par,
    dy,
    W,
    tout,
    rtau,
    tmp,
    energy,
):
    """State derivative into ``dy``; probe data into ``W``/``tout``/``rtau``/``energy``.

    Returns 0 on success, ``-(i+1)`` for a singular inertia on body ``i``, and
    ``j+1`` when effort ``j`` (translational couplings, then rotational, then
    the driver) exceeds the blow-up limit.
    """
    nb = masses.shape[0]
    nc = tc_ia.shape[0]
    nr = rc_ia.shape[0]
    th0 = BLOCK * nb
    ke = 0.0
    pe_g = 0.0
    for i in range(nb):
        b = BLOCK * i
        w0, w1, w2, cond = _omega_nb(y, b, inertia, i)
        if not cond <= COND_LIMIT:
            return -(i + 1)
        W[i, 0] = w0
        W[i, 1] = w1
        W[i, 2] = w2
        m = masses[i]
        for c in range(3):
            dy[b + c] = y[b + 12 + c] / m
        for c in range(3):
            # dR/dt = skew(w) R, column c
            r0 = y[b + 3 + c]
            r1 = y[b + 6 + c]
            r2 = y[b + 9 + c]
            dy[b + 3 + c] = w1 * r2 - w2 * r1
            dy[b + 6 + c] = w2 * r0 - w0 * r2
            dy[b + 9 + c] = w0 * r1 - w1 * r0
        for c in range(3):
            dy[b + 12 + c] = m * gravity[c]
            dy[b + 15 + c] = 0.0
        pp = y[b + 12] ** 2 + y[b + 13] ** 2 + y[b + 14] ** 2
        ke += 0.5 * pp / m + 0.5 * (w0 * y[b + 15] + w1 * y[b + 16] + w2 * y[b + 17])
        pe_g -= m * (gravity[0] * y[b] + gravity[1] * y[b + 1] + gravity[2] * y[b + 2])
    pe = pe_g
    pdiss = 0.0
    for j in range(nc):
        ia = tc_ia[j]
        ib = tc_ib[j]
        jf = tc_if[j]
        ba = BLOCK * ia if ia >= 0 else -1
        bb = BLOCK * ib if ib >= 0 else -1
        bf = BLOCK * jf if jf >= 0 else -1
        f0, f1, f2 = _trans_nb(y, ba, bb, bf, tc_ma[j], tc_mb[j], W, ia, ib, jf,
                               off_a, off_b, tc_k, tc_d, tc_free, j, tout)
        if not (abs(f0) <= FORCE_LIMIT and abs(f1) <= FORCE_LIMIT and abs(f2) <= FORCE_LIMIT):
            return j + 1
        if ib >= 0:
            x0 = tout[j, 2, 0] - y[bb]
            x1 = tout[j, 2, 1] - y[bb + 1]
            x2 = tout[j, 2, 2] - y[bb + 2]
            dy[bb + 12] += f0
            dy[bb + 13] += f1
            dy[bb + 14] += f2
            dy[bb + 15] += x1 * f2 - x2 * f1
            dy[bb + 16] += x2 * f0 - x0 * f2
            dy[bb + 17] += x0 * f1 - x1 * f0
        if ia >= 0:
            x0 = tout[j, 1, 0] - y[ba]
            x1 = tout[j, 1, 1] - y[ba + 1]
            x2 = tout[j, 1, 2] - y[ba + 2]
            dy[ba + 12] -= f0
            dy[ba + 13] -= f1
            dy[ba + 14] -= f2
            dy[ba + 15] -= x1 * f2 - x2 * f1
            dy[ba + 16] -= x2 * f0 - x0 * f2
            dy[ba + 17] -= x0 * f1 - x1 * f0
        for c in range(3):
            pe += 0.5 * tc_k[j, c] * tout[j, 3, c] * tout[j, 3, c]
            pdiss += tc_d[j, c] * tout[j, 4, c] * tout[j, 4, c]
    for j in range(nr):
        ia = rc_ia[j]
        ib = rc_ib[j]
        off = th0 + 3 * j
        big = False
        for c in range(3):
            tau, rate = _rot_nb(W[ia, c], W[ib, c], y[off + c], rc_k[j], rc_d[j])
            rtau[j, c] = tau
            dy[off + c] = rate
            big = big or not abs(tau) <= FORCE_LIMIT
            dy[BLOCK * ia + 15 + c] += tau
            dy[BLOCK * ib + 15 + c] -= tau
            pe += 0.5 * rc_k[j] * y[off + c] * y[off + c]
            pdiss += rc_d[j] * rate * rate
        if big:
            return nc + j + 1
    doff = th0 + 3 * nr
    theta_err = y[doff]
    tc, slip = _drive_nb(W[drv_i, 0], W[drv_i, 1], W[drv_i, 2], drv_axis,
                         drv_par[0], drv_par[1], drv_par[2], theta_err)
    if not abs(tc) <= FORCE_LIMIT:
        return nc + nr + 1
    for c in range(3):
        dy[BLOCK * drv_i + 15 + c] += tc * drv_axis[c]
    dy[doff] = slip
    pe += 0.5 * drv_par[1] * theta_err * theta_err
    pdiss += drv_par[2] * slip * slip
    energy[E_KE] = ke
    energy[E_PE] = pe
    energy[E_PIN] = tc * drv_par[0]
    energy[E_PDISS] = pdiss
    energy[E_TC] = tc
    return 0


class Workspace:
    """Scratch buffers for one evaluation; reuse to avoid allocation."""

    def __init__(self, m: "Mechanism"):
        nb, nc, nr = len(m.bodies), len(m.trans_couplings), len(m.rot_couplings)
        self.dy = np.zeros(m.state_size)
        self.W = np.zeros((nb, 3))
        self.tout = np.zeros((nc, 5, 3))
        self.rtau = np.zeros((max(nr, 1), 3))
        self.tmp = np.zeros((4, 3))
        self.energy = np.zeros(5)

    def args(self):
        return (self.dy, self.W, self.tout, self.rtau, self.tmp, self.energy)


@dataclass
class Mechanism:
    """Bodies, penalty couplings and one velocity driver.

    GROUND (id 0) is implicit: it never appears in ``bodies`` and has identity
    orientation and zero velocity.
    """

    bodies: list[RigidBody]
    trans_couplings: list[TranslationalCoupling]
    rot_couplings: list[RotationalCoupling]
    driver: VelocityDriver
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    probe_map: ProbeMap | None = None

    def __post_init__(self):
        self.bodies = sorted(self.bodies, key=lambda b: b.id)
        self.gravity = np.array(self.gravity, dtype=float).reshape(3)
        ids = [b.id for b in self.bodies]
        if not ids:
            raise ValueError("a mechanism needs at least one body for its driver")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate body ids: {ids}")
        if GROUND in ids:
            raise ValueError(f"body id {GROUND} is reserved for ground")
        known = set(ids)
        names = [c.name for c in self.trans_couplings] + [c.name for c in self.rot_couplings]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate coupling names: {names}")
        for c in self.trans_couplings:
            for ref in (c.a, c.b):
                if ref.body != GROUND and ref.body not in known:
                    raise ValueError(f"{c.name}: unknown body {ref.body}")
            if c.frame is not None and c.frame not in known:
                raise ValueError(f"{c.name}: unknown frame body {c.frame}")
        for c in self.rot_couplings:
            if c.a not in known or c.b not in known:
                raise ValueError(f"{c.name}: unknown body in ({c.a}, {c.b})")
        if self.driver.body not in known:
            raise ValueError(f"driver: unknown body {self.driver.body}")

    @property
    def state_size(self) -> int:
        return BLOCK * len(self.bodies) + 3 * len(self.rot_couplings) + 1

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.bodies)}

    def body(self, body_id: int) -> RigidBody:
        return self.bodies[self.index[body_id]]

    def coupling_index(self, name: str) -> int:
        for j, c in enumerate(self.trans_couplings):
            if c.name == name:
                return j
        raise KeyError(name)

    def effort_name(self, code: int) -> str:
        """Name of the coupling behind a positive kernel status code."""
        nc = len(self.trans_couplings)
        if code <= nc:
            return self.trans_couplings[code - 1].name
        if code <= nc + len(self.rot_couplings):
            return self.rot_couplings[code - nc - 1].name
        return "driver"

    @cached_property
    def packed(self) -> tuple:
        idx = self.index

        def bi(body_id):
            return -1 if body_id == GROUND else idx[body_id]

        def mass(body_id):
            return 1.0 if body_id == GROUND else self.body(body_id).mass

        tcs = self.trans_couplings
        rcs = self.rot_couplings
        nc = len(tcs)
        i64 = np.int64
        packed = (
            np.array([b.mass for b in self.bodies]),
            np.array([b.inertia_body for b in self.bodies]),
            self.gravity.copy(),
            np.array([bi(c.a.body) for c in tcs], dtype=i64),
            np.array([bi(c.b.body) for c in tcs], dtype=i64),
            np.array([-1 if c.frame is None else idx[c.frame] for c in tcs], dtype=i64),
            np.array([mass(c.a.body) for c in tcs]),
            np.array([mass(c.b.body) for c in tcs]),
            np.array([c.a.offset for c in tcs]).reshape(nc, 3),
            np.array([c.b.offset for c in tcs]).reshape(nc, 3),
            np.array([c.stiffness for c in tcs]).reshape(nc, 3),
            np.array([c.damping for c in tcs]).reshape(nc, 3),
            np.array([c.free_mask for c in tcs], dtype=np.bool_).reshape(nc, 3),
            np.array([idx[c.a] for c in rcs], dtype=i64),
            np.array([idx[c.b] for c in rcs], dtype=i64),
            np.array([c.stiffness for c in rcs], dtype=float),
            np.array([c.damping for c in rcs], dtype=float),
            idx[self.driver.body],
            np.array(self.driver.axis),
            np.array([self.driver.rate, self.driver.K_C, self.driver.R_C]),
        )
        for arr in packed:
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
        return packed

    def evaluate(self, y: np.ndarray, ws: Workspace | None = None, t: float | None = None) -> Workspace:
        """Run the compiled evaluation at flat state ``y``; raise on failure."""
        ws = ws or Workspace(self)
        status = _evaluate_nb(np.ascontiguousarray(y, dtype=float), *self.packed, *ws.args())
        if status != 0:
            raise_for_status(self, status, t)
        return ws


def raise_for_status(m: Mechanism, status: int, t: float | None = None):
    when = "" if t is None else f" at t = {t:.6g} s"
    if status < 0:
        body = m.bodies[-status - 1]
        raise SingularInertiaError(f"body {body.id}: world inertia is singular{when}")
    name = m.effort_name(status)
    raise BlowUpError(
        f"effort in coupling {name!r} exceeded {FORCE_LIMIT:g}{when}", coupling=name, time=t
    )


# ---------------------------------------------------------------- flat state


def flatten(s: SystemState) -> np.ndarray:
    parts = [s.bodies[k].to_block() for k in sorted(s.bodies)]
    parts.extend(np.asarray(th, dtype=float) for th in s.theta)
    parts.append(np.array([s.theta_err]))
    return np.concatenate(parts)


def unflatten(m: Mechanism, f, t: float = 0.0) -> SystemState:
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.shape[0] != m.state_size:
        raise ValueError(f"flat state has length {f.size}, mechanism needs {m.state_size}")
    nb = len(m.bodies)
    bodies = {b.id: BodyState.from_block(f[BLOCK * i:BLOCK * (i + 1)]) for i, b in enumerate(m.bodies)}
    th0 = BLOCK * nb
    theta = [f[th0 + 3 * j:th0 + 3 * j + 3] for j in range(len(m.rot_couplings))]
    return SystemState(bodies, theta, f[-1], t)


# ---------------------------------------------------------------- public operations


def derivative(m: Mechanism, s: SystemState) -> SystemState:
    """Time derivative of every state component, packaged as a SystemState.

    The ``t`` field of the result is 1 (the rate of time itself).
    """
    ws = m.evaluate(flatten(s), t=s.t)
    return unflatten(m, ws.dy.copy(), t=1.0)


def force_on(m: Mechanism, ws: Workspace, coupling: str, body_id: int) -> np.ndarray:
    """Force exerted by ``coupling`` on ``body_id`` from an evaluated workspace."""
    j = m.coupling_index(coupling)
    c = m.trans_couplings[j]
    if c.b.body == body_id:
        return ws.tout[j, 0].copy()
    if c.a.body == body_id:
        return -ws.tout[j, 0]
    raise ValueError(f"coupling {coupling!r} does not act on body {body_id}")


def probes(m: Mechanism, s: SystemState, prev_unwrapped: float | None = None) -> ProbeRecord:
    """Evaluate the logged channels at state ``s``.

    ``prev_unwrapped`` is the previous sample's cumulative crank angle; the new
    cumulative value is the nearest 2*pi branch to it.
    """
    pm = m.probe_map or ProbeMap()
    ws = m.evaluate(flatten(s), t=s.t)
    return _record(m, pm, s, ws, prev_unwrapped)


def _record(m, pm, s, ws, prev_unwrapped):
    crank = s.bodies[pm.crank]
    angle = angle_about_z(crank.R)
    if prev_unwrapped is None:
        unwrapped = angle
    else:
        unwrapped = angle + 2.0 * math.pi * round((prev_unwrapped - angle) / (2.0 * math.pi))
    rocker = s.bodies[pm.rocker]
    slider2 = s.bodies[pm.slider2]
    return ProbeRecord(
        t=s.t,
        crank_angle=angle,
        crank_angle_unwrapped=unwrapped,
        w1=ws.W[m.index[pm.crank]].copy(),
        L1=crank.L.copy(),
        F_O1=force_on(m, ws, pm.pin_o1, pm.crank),
        T_c=float(ws.energy[E_TC]),
        F_A2=force_on(m, ws, pm.pin_a, pm.slider),
        r_C3=rocker.r_com.copy(),
        p3=rocker.p.copy(),
        F_O3=force_on(m, ws, pm.pin_o3, pm.rocker),
        r_C5=slider2.r_com.copy(),
        p5=slider2.p.copy(),
        F_C5=force_on(m, ws, pm.pin_c5, pm.slider2),
        R1=crank.R.copy(),
        R4=s.bodies[pm.rod].R.copy(),
    )


def energy_audit(m: Mechanism, s: SystemState) -> tuple[float, float, float, float]:
    """Return ``(KE, PE, P_in, P_diss)`` at state ``s``.

    PE collects the coupling springs, the drive spring and the gravitational
    potential ``-m g . r``. Along any trajectory ``d(KE + PE)/dt = P_in - P_diss``.
    """
    e = m.evaluate(flatten(s), t=s.t).energy
    return float(e[E_KE]), float(e[E_PE]), float(e[E_PIN]), float(e[E_PDISS])


def coupling_deflections(m: Mechanism, s: SystemState) -> dict[str, float]:
    """Norm of each translational coupling's constrained deflection (free axes excluded)."""
    ws = m.evaluate(flatten(s), t=s.t)
    out = {}
    for j, c in enumerate(m.trans_couplings):
        d = np.where(c.free_mask, 0.0, ws.tout[j, 3])
        out[c.name] = float(np.linalg.norm(d))
    return out
