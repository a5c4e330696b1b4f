"""The crank-shaper quick-return mechanism and its kinematic ground truth.

Layout (world frame, z out of the plane)::

    O1 = (0, 0)        crank pivot, crank of radius r turns about z
    O3 = (0, -d)       rocker pivot; the rocker passes through crank pin A
    slider line y = h  slider 2 runs along x on this line, pulled by the rod
                       from the rocker tip

Links: 1 crank, 2 slider block riding on the rocker, 3 rocker, 4 connecting
rod, 5 slider 2. Every link frame has x along the link's long axis with its
origin at the COM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from qrmsim.body import BodyState, RigidBody, box_inertia
from qrmsim.couplings import (
    GROUND,
    AnchorRef,
    RotationalCoupling,
    TranslationalCoupling,
    VelocityDriver,
)
from qrmsim.errors import GeometryError
from qrmsim.mechanism import Mechanism, ProbeMap, SystemState
from qrmsim.spatial import rot_z

CRANK, SLIDER, ROCKER, ROD, SLIDER2 = 1, 2, 3, 4, 5
LINK_IDS = {"crank": CRANK, "slider": SLIDER, "rocker": ROCKER, "rod": ROD, "slider2": SLIDER2}


@dataclass(frozen=True)
class LinkParams:
    mass: float
    lx: float
    ly: float = 0.01
    lz: float = 0.01


@dataclass(frozen=True)
class CouplingParams:
    stiffness: float
    damping: float


@dataclass(frozen=True)
class DriveParams:
    rate: float = 5.0
    K_C: float = 100.0
    R_C: float = 100.0


LINK_DEFAULTS = {
    "crank": LinkParams(0.5, 0.2),
    "slider": LinkParams(0.1, 0.01),
    "rocker": LinkParams(0.7, 0.7),
    "rod": LinkParams(0.3, 0.4),
    "slider2": LinkParams(0.1, 0.01),
}

# keyed by the subscripts of the joint they realize
COUPLING_DEFAULTS = {
    "01": CouplingParams(1.0e5, 20.0),
    "12": CouplingParams(1.0e5, 20.0),
    "03": CouplingParams(1.0e5, 20.0),
    "3C": CouplingParams(1.0e5, 20.0),
    "23r": CouplingParams(100.0, 0.5),
    "34": CouplingParams(1.0e5, 20.0),
    "45": CouplingParams(1.0e5, 20.0),
    "5C": CouplingParams(1.0e5, 20.0),
}


@dataclass(frozen=True)
class QrmGeometry:
    crank_radius: float = 0.2
    rocker_length: float = 0.7
    rod_length: float = 0.4
    pivot_distance: float = 0.4
    slider_line_y: float = 0.3
    initial_crank_angle: float = math.pi / 2

    def validate(self) -> "QrmGeometry":
        r, l3, l4, d, h = (
            self.crank_radius,
            self.rocker_length,
            self.rod_length,
            self.pivot_distance,
            self.slider_line_y,
        )
        if not 0.0 < r < d:
            raise GeometryError(
                f"need 0 < crank_radius < pivot_distance, got r = {r:g}, d = {d:g}"
            )
        if not l3 > d + r:
            raise GeometryError(
                f"need rocker_length > pivot_distance + crank_radius, got {l3:g} <= {d + r:g}"
            )
        alpha = math.asin(r / d)
        low_tip = -d + l3 * math.cos(alpha)
        gap = max(abs(h - low_tip), abs(h - (-d + l3)))
        if not l4 > gap:
            raise GeometryError(
                f"need rod_length > max vertical gap to the slider line, got {l4:g} <= {gap:g}"
            )
        if not math.isfinite(self.initial_crank_angle):
            raise GeometryError("initial_crank_angle must be finite")
        return self

    @property
    def swing_half_angle(self) -> float:
        return math.asin(self.crank_radius / self.pivot_distance)


@dataclass(frozen=True)
class StrokeReport:
    forward_duration: float
    return_duration: float
    time_ratio: float
    stroke_length: float
    reversal_times: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "forward_duration_s": self.forward_duration,
            "return_duration_s": self.return_duration,
            "time_ratio": self.time_ratio,
            "stroke_length_m": self.stroke_length,
            "reversal_times_s": list(self.reversal_times),
        }


# ---------------------------------------------------------------- kinematics


def kinematic_oracle(theta: float, geom: QrmGeometry):
    """Rigid-link pose at crank angle ``theta``: ``(psi, tip, slider_x)``."""
    r, l3, l4 = geom.crank_radius, geom.rocker_length, geom.rod_length
    d, h = geom.pivot_distance, geom.slider_line_y
    ax, ay = r * math.cos(theta), r * math.sin(theta)
    psi = math.atan2(ay + d, ax)
    tip = np.array([l3 * math.cos(psi), -d + l3 * math.sin(psi), 0.0])
    gap = h - tip[1]
    disc = l4 * l4 - gap * gap
    if disc < 0.0:
        raise GeometryError(f"rod cannot reach the slider line at theta = {theta:g}")
    return psi, tip, float(tip[0] + math.sqrt(disc))


def oracle_sweep(geom: QrmGeometry, n_samples: int):
    """Uniform crank sweep over one revolution from the initial angle.

    Returns arrays ``(theta, psi, tip, slider_x)`` with ``tip`` of shape (n, 3).
    """
    if n_samples < 2:
        raise ValueError("oracle sweep needs at least 2 samples")
    theta = geom.initial_crank_angle + 2.0 * math.pi * np.arange(n_samples) / n_samples
    psi = np.empty(n_samples)
    tip = np.empty((n_samples, 3))
    x = np.empty(n_samples)
    for i, th in enumerate(theta):
        psi[i], tip[i], x[i] = kinematic_oracle(float(th), geom)
    return theta, psi, tip, x


def theoretical_time_ratio(r: float, d: float) -> float:
    """Forward/return duration ratio at constant crank speed."""
    if not 0.0 < r < d:
        raise ValueError(f"need 0 < r < d, got r = {r}, d = {d}")
    alpha = math.asin(r / d)
    return (math.pi + 2.0 * alpha) / (math.pi - 2.0 * alpha)


# ---------------------------------------------------------------- stroke timing


def _extrema(x):
    """Indices of strict sample extrema, skipping flat runs."""
    dx = np.diff(x)
    sign = np.sign(dx)
    idx = []
    last_sign = 0.0
    last_nonflat = 0
    for i, s in enumerate(sign):
        if s == 0.0:
            continue
        if last_sign != 0.0 and s != last_sign:
            # first sample after the last rising/falling step
            idx.append(last_nonflat + 1)
        last_sign = s
        last_nonflat = i
    return idx


def stroke_analysis(t, x, cutoff: float = 0.0) -> StrokeReport:
    """Reversal timing of a reciprocating signal.

    Reversals are the extrema of ``x``, refined by a parabola through the
    extremal sample and its two neighbours. The slower of the two stroke
    directions is reported as the forward stroke.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    keep = t >= cutoff
    t, x = t[keep], x[keep]
    if t.size < 5:
        raise ValueError("too few samples after the cutoff")
    times = []
    values = []
    for k in _extrema(x):
        if k <= 0 or k >= x.size - 1:
            continue
        x0, x1, x2 = x[k - 1], x[k], x[k + 1]
        curv = x0 - 2.0 * x1 + x2
        h0, h1 = t[k] - t[k - 1], t[k + 1] - t[k]
        if curv == 0.0 or abs(h0 - h1) > 1e-9 * max(h0, h1):
            times.append(t[k])
            values.append(x1)
            continue
        frac = 0.5 * (x0 - x2) / curv
        times.append(t[k] + frac * h1)
        values.append(x1 - 0.125 * (x2 - x0) ** 2 / curv)
    if len(times) < 3:
        raise ValueError(f"need at least 3 reversals, found {len(times)}")
    times = np.array(times)
    values = np.array(values)
    dur = np.diff(times)
    rising = np.diff(values) > 0.0
    if rising.all() or (~rising).all():
        raise ValueError("reversals do not alternate")
    up, down = dur[rising].mean(), dur[~rising].mean()
    forward, ret = (up, down) if up >= down else (down, up)
    stroke = max(values.max(), x.max()) - min(values.min(), x.min())
    return StrokeReport(float(forward), float(ret), float(forward / ret), float(stroke),
                        [float(v) for v in times])


# ---------------------------------------------------------------- assembly


def _merged(defaults, overrides):
    out = dict(defaults)
    for k, v in (overrides or {}).items():
        if k not in defaults:
            raise KeyError(f"unknown entry {k!r}")
        out[k] = v
    return out


def build_quick_return(
    link_params: dict[str, LinkParams] | None = None,
    coupling_params: dict[str, CouplingParams] | None = None,
    geom: QrmGeometry | None = None,
    drive: DriveParams | None = None,
    gravity=(0.0, 0.0, 0.0),
    sliding_friction: bool = False,
) -> tuple[Mechanism, SystemState]:
    """Assemble the five-link mechanism at rest at the initial crank angle.

    Every coupling starts with zero deflection. Link lengths along x must agree
    with the geometry (crank = crank_radius, rocker = rocker_length, rod =
    rod_length). With ``sliding_friction`` the slider's sliding axis gets the
    same viscous damping as its constrained axes.
    """
    geom = (geom or QrmGeometry()).validate()
    links = _merged(LINK_DEFAULTS, link_params)
    cp = _merged(COUPLING_DEFAULTS, coupling_params)
    drive = drive or DriveParams()
    for name, length in (
        ("crank", geom.crank_radius),
        ("rocker", geom.rocker_length),
        ("rod", geom.rod_length),
    ):
        if not math.isclose(links[name].lx, length, rel_tol=1e-12):
            raise GeometryError(f"{name} length {links[name].lx:g} disagrees with geometry {length:g}")

    r, l3, l4 = geom.crank_radius, geom.rocker_length, geom.rod_length
    d, h = geom.pivot_distance, geom.slider_line_y
    theta0 = geom.initial_crank_angle
    psi0, tip, xs = kinematic_oracle(theta0, geom)
    phi0 = math.atan2(h - tip[1], xs - tip[0])

    def body(name, attachments):
        p = links[name]
        return RigidBody(
            LINK_IDS[name], p.mass, box_inertia(p.mass, p.lx, p.ly, p.lz), attachments, name
        )

    half = 0.5
    bodies = [
        body("crank", {"O1": (-half * r, 0, 0), "A1": (half * r, 0, 0)}),
        body("slider", {"A2": (0, 0, 0)}),
        body("rocker", {"O3": (-half * l3, 0, 0), "A33": (half * l3, 0, 0), "axis": (0, 0, 0)}),
        body("rod", {"A33": (-half * l4, 0, 0), "C5": (half * l4, 0, 0)}),
        body("slider2", {"C5": (0, 0, 0)}),
    ]
    by_id = {b.id: b for b in bodies}

    def at(body_id, label):
        return AnchorRef(body_id, tuple(by_id[body_id].offset(label)))

    def pin(name, key, a, b):
        return TranslationalCoupling.pin(name, a, b, cp[key].stiffness, cp[key].damping)

    def slide(name, key, a, b, frame):
        k, c = cp[key].stiffness, cp[key].damping
        return TranslationalCoupling(
            name, a, b, (0.0, k, k), (c if sliding_friction else 0.0, c, c), frame,
            (not sliding_friction, False, False),
        )

    trans = [
        pin("O1", "01", AnchorRef(GROUND, (0.0, 0.0, 0.0)), at(CRANK, "O1")),
        pin("A", "12", at(CRANK, "A1"), at(SLIDER, "A2")),
        slide("slide", "3C", at(ROCKER, "axis"), at(SLIDER, "A2"), ROCKER),
        pin("O3", "03", AnchorRef(GROUND, (0.0, -d, 0.0)), at(ROCKER, "O3")),
        pin("A33", "34", at(ROCKER, "A33"), at(ROD, "A33")),
        pin("C5", "45", at(ROD, "C5"), at(SLIDER2, "C5")),
        slide("guide", "5C", AnchorRef(GROUND, (0.0, h, 0.0)), at(SLIDER2, "C5"), None),
    ]
    lock = cp["23r"]
    rots = [RotationalCoupling("lock", SLIDER, ROCKER, lock.stiffness, lock.damping)]
    driver = VelocityDriver(CRANK, (0.0, 0.0, 1.0), drive.rate, drive.K_C, drive.R_C)
    m = Mechanism(bodies, trans, rots, driver, np.asarray(gravity, dtype=float), ProbeMap())

    c0, s0 = math.cos(theta0), math.sin(theta0)
    a_pin = np.array([r * c0, r * s0, 0.0])
    R_rocker = rot_z(psi0)
    states = {
        CRANK: BodyState.at_rest(0.5 * a_pin, rot_z(theta0)),
        SLIDER: BodyState.at_rest(a_pin, R_rocker),
        ROCKER: BodyState.at_rest(
            np.array([0.0, -d, 0.0]) + 0.5 * l3 * R_rocker[:, 0], R_rocker
        ),
        ROD: BodyState.at_rest(0.5 * (tip + np.array([xs, h, 0.0])), rot_z(phi0)),
        SLIDER2: BodyState.at_rest(np.array([xs, h, 0.0]), np.eye(3)),
    }
    return m, SystemState(states, [np.zeros(3)], 0.0, 0.0)
