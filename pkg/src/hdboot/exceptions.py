"""Exception types raised by the estimation and resampling routines."""


class HdbootError(Exception):
    """Base class for all numeric failures in this package."""


class RankDeficientError(HdbootError):
    """Design matrix (or a reweighted version of it) is not full column rank."""


class NonConvergenceError(HdbootError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class DegenerateScaleError(HdbootError):
    """A scale estimate needed for standardization is zero."""


class ExcessiveFailuresError(HdbootError):
    """Too large a fraction of bootstrap replicates failed to refit."""


class InsufficientReplicatesError(HdbootError):
    """Not enough replicates to form the requested interval."""


class NoBracketError(HdbootError):
    """A root finder could not bracket the target value."""


class NoSolutionError(HdbootError):
    """A calibration search found no admissible parameter."""


class SingularCurvatureError(HdbootError):
    """The psi'-weighted curvature matrix is numerically singular."""


class ZeroRowError(HdbootError):
    """A design row is identically zero."""


class DegenerateCdfError(HdbootError):
    """All cdf increments vanish after tail clamping."""


class NumericalUnderflowError(HdbootError):
    """The Gaussian characteristic-function divisor underflows."""

    def __init__(self, message, suggested_bandwidth=None):
        super().__init__(message)
        self.suggested_bandwidth = suggested_bandwidth
