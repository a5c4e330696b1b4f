"""Exception hierarchy."""


class QrmError(Exception):
    """Base class for all errors raised by qrmsim."""


class OrientationError(QrmError, ValueError):
    """An orientation matrix is too far from a proper rotation."""


class SingularInertiaError(QrmError, ArithmeticError):
    """A world-frame inertia tensor is numerically singular."""


class GeometryError(QrmError, ValueError):
    """Linkage dimensions violate an assembly inequality."""


class StabilityError(QrmError, ValueError):
    """The time step exceeds the explicit RK4 stability bound."""


class ConfigError(QrmError, ValueError):
    """A run configuration document is malformed or invalid."""


class BlowUpError(QrmError, RuntimeError):
    """A coupling effort exceeded the blow-up sentinel during integration."""

    def __init__(self, message, *, coupling=None, time=None):
        super().__init__(message)
        self.coupling = coupling
        self.time = time
