"""Penalty-coupled rigid multibody simulation of a crank-shaper quick-return mechanism."""

from qrmsim.body import BodyState, RigidBody
from qrmsim.couplings import (
    GROUND,
    AnchorRef,
    RotationalCoupling,
    TranslationalCoupling,
    VelocityDriver,
    Wrench,
)
from qrmsim.errors import (
    BlowUpError,
    ConfigError,
    GeometryError,
    OrientationError,
    QrmError,
    SingularInertiaError,
    StabilityError,
)
from qrmsim.integrator import SimConfig, simulate
from qrmsim.mechanism import Mechanism, ProbeRecord, SystemState
from qrmsim.scenario import QrmGeometry, StrokeReport, build_quick_return

__all__ = [
    "GROUND",
    "AnchorRef",
    "BlowUpError",
    "BodyState",
    "ConfigError",
    "GeometryError",
    "Mechanism",
    "OrientationError",
    "ProbeRecord",
    "QrmError",
    "QrmGeometry",
    "RigidBody",
    "RotationalCoupling",
    "SimConfig",
    "SingularInertiaError",
    "StabilityError",
    "StrokeReport",
    "SystemState",
    "TranslationalCoupling",
    "VelocityDriver",
    "Wrench",
    "build_quick_return",
    "simulate",
]
