"""Acceptance criteria 1-10 on the default quick-return run.

Each test records a one-line verdict with the measured values; the lines are
printed together at the end of the pytest session.
"""

import math

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, brick, idle_driver
from qrmsim import cli
from qrmsim.body import BodyState, world_inertia
from qrmsim.couplings import AnchorRef, TranslationalCoupling
from qrmsim.integrator import DEFAULT_DT, SimConfig, simulate
from qrmsim.mechanism import Mechanism, SystemState
from qrmsim.scenario import (
    QrmGeometry,
    build_quick_return,
    kinematic_oracle,
    stroke_analysis,
    theoretical_time_ratio,
)

PERIOD = 2 * math.pi / 5.0
CUTOFF = 2.0


def verdict(n, title, checks):
    """Record ``checks`` = [(label, measured, ok)] and fail on any miss."""
    ok = all(c[2] for c in checks)
    detail = "; ".join(f"{label} {value}" + ("" if good else " [MISS]") for label, value, good in checks)
    ACCEPTANCE_LINES[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    assert ok, ACCEPTANCE_LINES[n]


@pytest.fixture(scope="module")
def run():
    m, s0 = build_quick_return()
    ts = simulate(m, s0, SimConfig(dt=DEFAULT_DT, t_end=10.0, record_stride=200))
    return m, ts


@pytest.fixture(scope="module")
def strokes(run):
    _, ts = run
    return stroke_analysis(ts.t, ts.column("rC5x"), CUTOFF)


def _crossing_times(t, angle):
    turns = np.arange(math.ceil(angle[0] / (2 * math.pi)), math.floor(angle[-1] / (2 * math.pi)) + 1)
    return np.interp(turns * 2 * math.pi, angle, t)


def test_criterion_1_drive_tracking(run):
    _, ts = run
    t, angle = ts.t, ts.column("crank_angle_unwrapped")
    mean_w = (angle[-1] - np.interp(t[-1] - PERIOD, t, angle)) / PERIOD
    steady = t >= CUTOFF
    period = np.diff(_crossing_times(t[steady], angle[steady]))[-1]
    verdict(1, "drive tracking", [
        ("mean w_z last cycle", f"{mean_w:.6f} rad/s", abs(mean_w - 5.0) <= 0.005 * 5.0),
        ("cycle period", f"{period:.6f} s", abs(period - 1.25664) <= 0.01 * 1.25664),
    ])


def test_criterion_2_quick_return_ratio(strokes):
    theory = theoretical_time_ratio(0.2, 0.4)
    verdict(2, "quick-return ratio", [
        ("time_ratio", f"{strokes.time_ratio:.4f} (theory {theory:.4f})",
         abs(strokes.time_ratio - theory) <= 0.05 * theory),
        ("return < forward", f"{strokes.return_duration:.4f} < {strokes.forward_duration:.4f} s",
         strokes.return_duration < strokes.forward_duration),
    ])


def test_criterion_3_kinematic_consistency(run, strokes):
    _, ts = run
    g = QrmGeometry()
    steady = ts.t >= CUTOFF
    angle = ts.column("crank_angle_unwrapped")[steady]
    oracle_x = np.array([kinematic_oracle(a, g)[2] for a in angle])
    dev = np.abs(ts.column("rC5x")[steady] - oracle_x).max()
    verdict(3, "kinematic consistency", [
        ("max |x - x_oracle|", f"{dev * 1e3:.3f} mm", dev <= 5e-3),
        ("stroke", f"{strokes.stroke_length:.5f} m", abs(strokes.stroke_length - 0.7) <= 5e-3),
    ])


def test_criterion_4_constraint_quality(run):
    m, ts = run
    steady = ts.t >= CUTOFF
    worst = ts.deflections[steady].max()
    dy = np.abs(ts.column("rC5y") - 0.3).max()
    dz = np.abs(ts.column("rC5z")).max()
    verdict(4, "constraint quality", [
        ("max joint separation", f"{worst * 1e3:.4f} mm", worst <= 1e-3),
        ("guide |y-0.3|", f"{dy:.3e} m", dy <= 1e-3),
        ("guide |z|", f"{dz:.3e} m", dz <= 1e-9),
    ])


def test_criterion_5_planarity(run):
    m, ts = run
    fz = max(np.abs(ts.column(c)).max() for c in ("FO1z", "FA2z", "FO3z", "FC5z"))
    com_z = np.abs(ts.states[:, [18 * i + 2 for i in range(len(m.bodies))]]).max()
    verdict(5, "planarity", [
        ("max |F_z|", f"{fz:.3e} N", fz <= 1e-9),
        ("max |z_COM|", f"{com_z:.3e} m", com_z <= 1e-9),
    ])


def test_criterion_6_crank_angular_momentum(run):
    m, ts = run
    steady = ts.t >= CUTOFF
    L = ts.column("L1z")[steady]
    I_zz = world_inertia(ts.state(-1).bodies[1].R, m.body(1).inertia_body)[2, 2]
    ripple = (L.max() - L.min()) / L.mean()
    ratio = L.mean() / (I_zz * 5.0)
    verdict(6, "crank angular momentum", [
        ("ripple", f"{ripple * 100:.2f} %", ripple <= 0.05),
        ("mean / (I_zz * 5)", f"{ratio:.6f}", abs(ratio - 1.0) <= 0.01),
    ])


def test_criterion_7_momentum_asymmetry(run, strokes):
    _, ts = run
    t = ts.t
    p5 = np.abs(ts.column("p5x"))
    p3 = np.hypot(ts.column("p3x"), ts.column("p3y"))
    peaks = {"forward": [0.0, 0.0], "return": [0.0, 0.0]}
    rev = strokes.reversal_times
    for a, b in zip(rev, rev[1:]):
        seg = (t >= a) & (t <= b)
        # the shorter-duration stroke is the return
        kind = "return" if b - a < 0.5 * PERIOD else "forward"
        peaks[kind][0] = max(peaks[kind][0], p5[seg].max())
        peaks[kind][1] = max(peaks[kind][1], p3[seg].max())
    (f5, f3), (r5, r3) = peaks["forward"], peaks["return"]
    verdict(7, "momentum asymmetry", [
        ("|p5x| return vs forward", f"{r5:.4f} > {f5:.4f} kg m/s", r5 - f5 > 0.0),
        ("|p3| return vs forward", f"{r3:.4f} > {f3:.4f} kg m/s", r3 - f3 > 0.0),
    ])


def test_criterion_8_transient_decay(run):
    _, ts = run
    t = ts.t
    f_o1 = np.linalg.norm(np.column_stack([ts.column(c) for c in ("FO1x", "FO1y", "FO1z")]), axis=1)
    tc = np.abs(ts.column("Tc"))
    early, last = t <= 0.5, t >= t[-1] - PERIOD
    grid = np.linspace(t[-1] - 2 * PERIOD, t[-1] - PERIOD, 2000)
    worst_name, worst = "", 0.0
    steady = t >= CUTOFF
    for name in ("FO1x", "FO1y", "Tc", "FA2x", "FA2y", "FO3x", "FO3y", "FC5x", "FC5y",
                 "p3x", "p3y", "p5x", "w1z", "L1z", "rC5x"):
        y = ts.column(name)
        span = np.ptp(y[steady])
        rms = np.sqrt(np.mean((np.interp(grid, t, y) - np.interp(grid + PERIOD, t, y)) ** 2)) / span
        if rms > worst:
            worst_name, worst = name, rms
    tc0 = float(ts.column("Tc")[0])
    verdict(8, "transient decay", [
        ("peak |F_O1| early vs steady", f"{f_o1[early].max():.2f} > {f_o1[last].max():.2f} N",
         f_o1[early].max() > f_o1[last].max()),
        ("peak |T_c| early vs steady", f"{tc[early].max():.2f} > {tc[last].max():.2f} N m",
         tc[early].max() > tc[last].max()),
        ("T_c(0)", f"{tc0!r} N m", tc0 == 500.0),
        ("worst cycle-to-cycle rms", f"{worst * 100:.4f} % ({worst_name})", worst <= 0.01),
    ])


def _spinning_body():
    body = brick(1, mass=1.3, dims=(0.4, 0.25, 0.1))
    m = Mechanism([body], [], [], idle_driver())
    L0 = np.array([0.02, -0.035, 0.05])
    s0 = SystemState({1: BodyState(np.zeros(3), np.eye(3), np.zeros(3), L0)}, [], 0.0, 0.0)
    return m, s0, L0


def _pinned_pair():
    b1 = brick(1, mass=0.8, attachments={"P": (0.15, 0.0, 0.0)})
    b2 = brick(2, mass=0.3, dims=(0.2, 0.05, 0.05), attachments={"P": (-0.1, 0.0, 0.0)})
    pin = TranslationalCoupling.pin("P", AnchorRef(1, (0.15, 0, 0)), AnchorRef(2, (-0.1, 0, 0)), 1e5, 20.0)
    m = Mechanism([b1, b2], [pin], [], idle_driver())
    s0 = SystemState(
        {
            1: BodyState([0, 0, 0], np.eye(3), [0.4, -0.2, 0.1], [0.0, 0.01, 0.03]),
            2: BodyState([0.25, 0.002, 0], np.eye(3), [-0.1, 0.3, 0.0], [0.002, 0.0, -0.004]),
        },
        [],
        0.0,
        0.0,
    )
    return m, s0


def test_criterion_9_conservation(run):
    m_spin, s_spin, L0 = _spinning_body()
    spin = simulate(m_spin, s_spin, SimConfig(dt=1e-4, t_end=1.0, record_stride=100))
    L_err = np.abs(spin.states[:, 15:18] - L0).max() / np.linalg.norm(L0)
    ke = spin.energy[:, 0]
    ke_err = np.abs(ke - ke[0]).max() / ke[0]

    m_pair, s_pair = _pinned_pair()
    pair = simulate(m_pair, s_pair, SimConfig(dt=1e-5, t_end=1.0, record_stride=1000))
    p_tot = pair.states[:, 12:15] + pair.states[:, 30:33]
    p_err = np.abs(p_tot - p_tot[0]).max()

    m, ts = run
    worst = 0.0
    for start in (3.0, 7.0):
        i = int(np.argmin(np.abs(ts.t - start)))
        n = int(math.ceil(PERIOD / DEFAULT_DT / 2)) * 2
        cyc = simulate(m, ts.state(i), SimConfig(dt=DEFAULT_DT, t_end=n * DEFAULT_DT, record_stride=2))
        e = cyc.energy
        H = e[:, 0] + e[:, 1]
        flow = e[:, 2] - e[:, 3]
        # Simpson on the uniform record grid
        h = cyc.t[1] - cyc.t[0]
        work = h / 3 * (flow[0] + flow[-1] + 4 * flow[1:-1:2].sum() + 2 * flow[2:-1:2].sum())
        scale = h * np.abs(e[:, 2]).sum()
        worst = max(worst, abs(H[-1] - H[0] - work) / scale)
    verdict(9, "conservation rigs", [
        ("spinning body |dL|/|L|", f"{L_err:.2e}", L_err <= 1e-12),
        ("spinning body |dKE|/KE", f"{ke_err:.2e}", ke_err <= 1e-6),
        ("pinned pair |dp|", f"{p_err:.2e} kg m/s", p_err <= 1e-9),
        ("cycle energy residual", f"{worst:.2e}", worst <= 0.01),
    ])


def test_criterion_10_numerics(run, tmp_path):
    _, ts = run
    ortho = ts.orthonormality_defect.max()

    # halving dt against a dt/8 reference, over the first second
    m, s0 = build_quick_return()
    window = 1.0
    coarse = DEFAULT_DT

    def slider_x(dt):
        stride = int(round(coarse / dt)) * 20
        res = simulate(m, s0, SimConfig(dt=dt, t_end=window, record_stride=stride))
        return res.states[:, 18 * m.index[5]]

    ref = slider_x(coarse / 8)
    e1 = np.abs(slider_x(coarse) - ref).max()
    e2 = np.abs(slider_x(coarse / 2) - ref).max()
    gain = e1 / e2 if e2 > 0 else math.inf

    doc = tmp_path / "c.json"
    doc.write_text('{"sim": {"t_end": 0.5}}')
    for name in ("a.csv", "b.csv"):
        assert cli.main(["run", "--config", str(doc), "--out", str(tmp_path / name)]) == 0
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    verdict(10, "numerics", [
        ("orthonormality defect", f"{ortho:.2e}", ortho <= 1e-9),
        ("halving-dt error gain", f"{gain:.2f} (errors {e1:.2e} -> {e2:.2e} m)", gain >= 8.0),
        ("rerun byte-identical", str(same), same),
    ])
