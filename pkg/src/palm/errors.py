"""Exception types raised by the palm package.

Contract-style failures (bad inputs, degenerate geometry, missing state)
derive from :class:`PalmError`. Numerical breakdowns that abort a
computation mid-flight use :class:`NumericalError` so callers can
distinguish "you called this wrong" from "the arithmetic blew up".
"""


class PalmError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateVector(PalmError):
    """A vector with near-zero norm cannot be projected onto the sphere."""


class SpecInfeasible(PalmError):
    """A synthetic-data spec cannot be satisfied (e.g. separation too tight)."""


class NumericalError(PalmError):
    """Non-finite values or vanishing denominators inside a computation."""


class EmptyClass(PalmError):
    """An assignment was requested for a class with no samples."""


class DegeneratePrototype(PalmError):
    """A prototype blend vector collapsed to (near) zero norm."""


class InvalidConfiguration(PalmError):
    """A hyperparameter combination outside the supported domain."""


class InvalidInput(PalmError):
    """Mismatched shapes or otherwise malformed arguments."""


class InsufficientData(PalmError):
    """Not enough samples to fit the requested statistic."""


class SingularCovariance(PalmError):
    """The (regularized) covariance matrix is not positive definite."""


class DegenerateRange(PalmError):
    """A score series is constant, so min-max scaling is undefined."""


class InternalError(PalmError):
    """An internally-produced value violated its own range contract."""
