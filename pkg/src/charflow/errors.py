"""Exception types shared across the package."""


class CharflowError(Exception):
    """Base class for all package errors."""


class MeasureError(CharflowError):
    """Invalid measure construction or operation."""


class FieldError(CharflowError):
    """Vector-field evaluation or declaration problem."""


class EnvelopeViolation(FieldError):
    """A sampled velocity exceeded the declared growth envelope."""


class QuadratureError(CharflowError):
    """Adaptive quadrature failed to converge; carries the partial value."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CostRangeError(CharflowError):
    """Requested value lies outside the range of the cost function."""


class FlowError(CharflowError):
    """Characteristic-flow integration failure; carries the partial trajectory."""

    def __init__(self, message, trajectory=None, atom_index=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.atom_index = atom_index


class TransportError(CharflowError):
    """Transport LP infeasibility, size-cap breach, or pivot-cycle guard."""


class ComparisonBoundError(CharflowError):
    """The transport comparison bound does not apply to the given inputs."""


class CutoffError(CharflowError):
    """Cutoff-family construction failure (root bracketing or gradient bound)."""


class MollifierError(CharflowError):
    """Mollifier grid or kernel-mass problem."""


class ScheduleError(CharflowError):
    """Parameter-schedule bisection could not bracket a solution."""


class ConfigError(CharflowError):
    """Invalid scenario configuration."""
