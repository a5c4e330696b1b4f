"""Fixed-step classical RK4 over the mechanism derivative.

Orientation matrices ride through the RK4 tableau as nine raw numbers and
are projected back onto the rotation group after the step. The whole time
loop runs inside one compiled kernel, so a run is deterministic and
allocation-free per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from qrmsim.body import BLOCK
from qrmsim.errors import OrientationError, StabilityError
from qrmsim.mechanism import (
    COLUMNS,
    E_KE,
    E_PDISS,
    E_PE,
    E_PIN,
    Mechanism,
    ProbeRecord,
    SystemState,
    Workspace,
    _evaluate_nb,
    _record,
    ProbeMap,
    flatten,
    raise_for_status,
    unflatten,
)
from qrmsim.spatial import _polar_nb, skew

__all__ = [
    "DEFAULT_DT",
    "RK4_REAL_LIMIT",
    "SimConfig",
    "TimeSeries",
    "check_time_step",
    "flatten",
    "rk4_step",
    "simulate",
    "stiffest_rate",
    "unflatten",
]

# Classical RK4 is stable on the negative real axis for h*|lambda| < 2.785
# and on the imaginary axis for h*|lambda| < 2.828.
RK4_REAL_LIMIT = 2.78
DEFAULT_DT = 5.0e-6


@dataclass(frozen=True)
class SimConfig:
    dt: float = DEFAULT_DT
    t_end: float = 10.0
    record_stride: int = 200
    renormalize_stride: int = 1

    def __post_init__(self):
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= self.dt:
            raise ValueError(f"t_end must be at least dt, got {self.t_end}")
        if self.record_stride < 1 or self.renormalize_stride < 1:
            raise ValueError("strides must be >= 1")
        n = self.t_end / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ValueError(f"t_end = {self.t_end} is not a whole number of steps of {self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


# ---------------------------------------------------------------- stability


def stiffest_rate(m: Mechanism, s: SystemState | None = None) -> float:
    """Estimate of the fastest eigenvalue magnitude of the linearized dynamics.

    Each coupling is treated as a spring-damper between two inertias. The
    inverse inertia seen by a translational anchor at body offset ``c`` is the
    largest eigenvalue of the point mobility ``I/m + skew(c)^T I_b^-1 skew(c)``;
    a rotational coupling sees ``1/I_min`` of each body, and the driver sees
    ``axis . I_world^-1 . axis`` at state ``s`` (``1/I_min`` without one). A mode with stiffness
    ``k``, damping ``c`` and inverse inertia ``mu`` has its fastest root of
    ``s^2 + c mu s + k mu = 0`` bounded by ``c mu + sqrt(k mu)``.
    """
    bodies = {b.id: b for b in m.bodies}
    inv_i = {b.id: 1.0 / float(np.min(np.linalg.eigvalsh(b.inertia_body))) for b in m.bodies}

    def mu_trans(ref):
        if ref.body == 0:
            return 0.0
        b = bodies[ref.body]
        S = skew(ref.offset)
        mob = np.eye(3) / b.mass + S.T @ np.linalg.inv(b.inertia_body) @ S
        return float(np.max(np.linalg.eigvalsh(mob)))

    def rate(k, c, mu):
        return c * mu + math.sqrt(k * mu)

    lam = 0.0
    for c in m.trans_couplings:
        mu = mu_trans(c.a) + mu_trans(c.b)
        for k, d in zip(c.stiffness, c.damping):
            lam = max(lam, rate(k, d, mu))
    for c in m.rot_couplings:
        lam = max(lam, rate(c.stiffness, c.damping, inv_i[c.a] + inv_i[c.b]))
    drv = m.driver
    if s is None:
        mu = inv_i[drv.body]
    else:
        R = s.bodies[drv.body].R
        axis = np.asarray(drv.axis)
        mu = float(axis @ R @ np.linalg.inv(bodies[drv.body].inertia_body) @ R.T @ axis)
    lam = max(lam, rate(drv.K_C, drv.R_C, mu))
    return lam


def check_time_step(m: Mechanism, dt: float, s: SystemState | None = None) -> None:
    lam = stiffest_rate(m, s)
    if dt * lam >= RK4_REAL_LIMIT:
        raise StabilityError(
            f"dt = {dt:g} s exceeds the RK4 stability bound {RK4_REAL_LIMIT / lam:.3g} s "
            f"(stiffest rate estimate {lam:.4g} 1/s)"
        )


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _renormalize_nb(y, nb):
    X = np.empty((3, 3))
    E = np.empty((3, 3))
    for i in range(nb):
        if _polar_nb(y, BLOCK * i + 3, X, E) < 0:
            return -(i + 1)
    return 0


@njit(cache=True)
def _rk4_nb(y, dt, p, k1, k2, k3, k4, ytmp, dy, W, tout, rtau, tmp, energy):
    """One RK4 step in place on ``y``; returns the evaluation status."""
    (masses, inertia, gravity, tc_ia, tc_ib, tc_if, tc_ma, tc_mb, off_a, off_b,
     tc_k, tc_d, tc_free, rc_ia, rc_ib, rc_k, rc_d, drv_i, drv_axis, drv_par) = p
    n = y.shape[0]
    half = 0.5 * dt
    for stage in range(4):
        if stage == 0:
            src = y
        else:
            src = ytmp
        st = _evaluate_nb(src, masses, inertia, gravity, tc_ia, tc_ib, tc_if, tc_ma, tc_mb,
                          off_a, off_b, tc_k, tc_d, tc_free, rc_ia, rc_ib, rc_k, rc_d,
                          drv_i, drv_axis, drv_par, dy, W, tout, rtau, tmp, energy)
        if st != 0:
            return st
        if stage == 0:
            for i in range(n):
                k1[i] = dy[i]
                ytmp[i] = y[i] + half * dy[i]
        elif stage == 1:
            for i in range(n):
                k2[i] = dy[i]
                ytmp[i] = y[i] + half * dy[i]
        elif stage == 2:
            for i in range(n):
                k3[i] = dy[i]
                ytmp[i] = y[i] + dt * dy[i]
        else:
            for i in range(n):
                k4[i] = dy[i]
    sixth = dt / 6.0
    for i in range(n):
        y[i] += sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return 0


@njit(cache=True)
def _run_nb(y, dt, n_steps, record_stride, renorm_stride, p, rec, rec_steps,
            dy, W, tout, rtau, tmp, energy):
    """Advance ``y`` by ``n_steps``, recording states into ``rec``.

    Returns ``(status, step, n_recorded)``; status 0 is success, a kernel code
    otherwise, or ``-1000 - i`` for a failed renormalization of body ``i``.
    """
    n = y.shape[0]
    nb = p[0].shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    ytmp = np.empty(n)
    nrec = 0
    rec[0, :] = y
    rec_steps[0] = 0
    nrec = 1
    for step in range(1, n_steps + 1):
        st = _rk4_nb(y, dt, p, k1, k2, k3, k4, ytmp, dy, W, tout, rtau, tmp, energy)
        if st != 0:
            return st, step, nrec
        if step % renorm_stride == 0 or step == n_steps:
            rs = _renormalize_nb(y, nb)
            if rs != 0:
                return -1000 + rs + 1, step, nrec
        if step % record_stride == 0 or step == n_steps:
            rec[nrec, :] = y
            rec_steps[nrec] = step
            nrec += 1
    return 0, n_steps, nrec


@njit(cache=True)
def _scan_nb(states, p, free, energy_out, defl_out, ortho_out, dy, W, tout, rtau, tmp, energy):
    """Energy terms, constrained deflections and orthonormality defect per recorded state."""
    nb = p[0].shape[0]
    nc = free.shape[0]
    for r in range(states.shape[0]):
        y = states[r]
        st = _evaluate_nb(y, p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9],
                          p[10], p[11], p[12], p[13], p[14], p[15], p[16], p[17], p[18], p[19],
                          dy, W, tout, rtau, tmp, energy)
        if st != 0:
            return st, r
        energy_out[r, 0] = energy[E_KE]
        energy_out[r, 1] = energy[E_PE]
        energy_out[r, 2] = energy[E_PIN]
        energy_out[r, 3] = energy[E_PDISS]
        for j in range(nc):
            acc = 0.0
            for c in range(3):
                if not free[j, c]:
                    acc += tout[j, 3, c] * tout[j, 3, c]
            defl_out[r, j] = np.sqrt(acc)
        worst = 0.0
        for i in range(nb):
            b = BLOCK * i + 3
            for a in range(3):
                for c in range(3):
                    g = 0.0
                    for k in range(3):
                        g += y[b + 3 * k + a] * y[b + 3 * k + c]
                    if a == c:
                        g -= 1.0
                    worst = max(worst, abs(g))
        ortho_out[r] = worst
    return 0, -1


def _raise(m, status, t):
    if status <= -1000:
        body = m.bodies[-(status + 1000)]
        raise OrientationError(f"body {body.id}: orientation left the rotation group at t = {t:.6g} s")
    raise_for_status(m, status, t)


def rk4_step(m: Mechanism, s: SystemState, dt: float, renormalize: bool = True) -> SystemState:
    """Advance ``s`` by one RK4 step of size ``dt``."""
    y = flatten(s)
    ws = Workspace(m)
    n = y.shape[0]
    bufs = [np.empty(n) for _ in range(5)]
    st = _rk4_nb(y, dt, m.packed, *bufs, *ws.args())
    if st != 0:
        raise_for_status(m, st, s.t + dt)
    if renormalize:
        rs = _renormalize_nb(y, len(m.bodies))
        if rs != 0:
            _raise(m, -1000 + rs + 1, s.t + dt)
    return unflatten(m, y, s.t + dt)


# ---------------------------------------------------------------- simulation


@dataclass
class TimeSeries:
    """Recorded states of one run plus the derived probe channels."""

    mechanism: Mechanism
    t: np.ndarray
    states: np.ndarray

    def state(self, i: int) -> SystemState:
        return unflatten(self.mechanism, self.states[i], self.t[i])

    @cached_property
    def _derived(self):
        m = self.mechanism
        pm = m.probe_map or ProbeMap()
        ws = Workspace(m)
        table = np.empty((self.t.size, len(COLUMNS)))
        records = []
        prev = None
        for i in range(self.t.size):
            s = self.state(i)
            m.evaluate(self.states[i], ws, t=self.t[i])
            rec = _record(m, pm, s, ws, prev)
            prev = rec.crank_angle_unwrapped
            records.append(rec)
            table[i] = rec.row()
        return records, table

    @cached_property
    def _scan(self):
        m = self.mechanism
        n = self.t.size
        energy = np.empty((n, 4))
        defl = np.empty((n, len(m.trans_couplings)))
        ortho = np.empty(n)
        free = np.array([c.free_mask for c in m.trans_couplings], dtype=np.bool_)
        free = free.reshape(len(m.trans_couplings), 3)
        st, row = _scan_nb(self.states, m.packed, free, energy, defl, ortho, *Workspace(m).args())
        if st != 0:
            raise_for_status(m, st, self.t[row])
        return energy, defl, ortho

    @property
    def records(self) -> list[ProbeRecord]:
        return self._derived[0]

    @property
    def table(self) -> np.ndarray:
        """Probe channels, one row per record, columns as ``COLUMNS``."""
        return self._derived[1]

    def column(self, name: str) -> np.ndarray:
        return self.table[:, COLUMNS.index(name)]

    @property
    def energy(self) -> np.ndarray:
        """Columns KE, PE, P_in, P_diss."""
        return self._scan[0]

    @property
    def deflections(self) -> np.ndarray:
        """Constrained-axis deflection norm per translational coupling."""
        return self._scan[1]

    @property
    def orthonormality_defect(self) -> np.ndarray:
        return self._scan[2]


def simulate(
    m: Mechanism, s0: SystemState, cfg: SimConfig, check_stability: bool = True
) -> TimeSeries:
    """Integrate from ``s0`` to ``s0.t + cfg.t_end``.

    Records the state at the start, every ``record_stride`` steps, and at the
    final step.
    """
    if check_stability:
        check_time_step(m, cfg.dt, s0)
    y = flatten(s0)
    n = cfg.n_steps
    n_rec = n // cfg.record_stride + 2
    rec = np.empty((n_rec, y.size))
    rec_steps = np.empty(n_rec, dtype=np.int64)
    ws = Workspace(m)
    status, step, nrec = _run_nb(
        y, cfg.dt, n, cfg.record_stride, cfg.renormalize_stride, m.packed, rec, rec_steps,
        *ws.args()
    )
    if status != 0:
        _raise(m, status, s0.t + step * cfg.dt)
    t = s0.t + rec_steps[:nrec] * cfg.dt
    return TimeSeries(m, t, rec[:nrec].copy())
