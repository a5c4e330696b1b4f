import numpy as np
import pytest

from qrmsim.body import BodyState, RigidBody, box_inertia
from qrmsim.couplings import VelocityDriver
from qrmsim.scenario import build_quick_return
from qrmsim.spatial import rot_z


@pytest.fixture(scope="session")
def qrm():
    return build_quick_return()


def idle_driver(body_id=1):
    """A driver that never produces torque."""
    return VelocityDriver(body_id, (0.0, 0.0, 1.0), 0.0, 0.0, 0.0)


def brick(body_id, mass=1.0, dims=(0.3, 0.2, 0.1), attachments=None):
    return RigidBody(body_id, mass, box_inertia(mass, *dims), attachments or {})


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def moving_state(rng, planar=False):
    R = rot_z(rng.uniform(-np.pi, np.pi)) if planar else random_rotation(rng)
    p = rng.normal(size=3)
    L = rng.normal(size=3)
    if planar:
        p[2] = 0.0
        L[:2] = 0.0
    return BodyState(rng.normal(size=3) * (np.array([1, 1, 0]) if planar else 1), R, p, L)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
