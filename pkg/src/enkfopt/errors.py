"""Exception hierarchy shared by the optimizer, models and harness."""


class EnKFError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EnKFError, ValueError):
    """Invalid configuration or parameter value."""


class ShapeError(EnKFError, ValueError):
    """Array dimensions do not agree."""


class NumericError(EnKFError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ParticleEvaluationError(NumericError):
    """A forward evaluation for one particle failed or returned non-finite output.

    ``particle`` is the column index of the offending particle, or ``None``
    for the center evaluation F(theta_bar).
    """

    def __init__(self, message, particle=None):
        super().__init__(message)
        self.particle = particle


class IllConditionedError(NumericError):
    """Factorization failed even after jitter escalation."""


class ScheduleError(EnKFError, ValueError):
    """Step-size schedule queried outside its domain."""


class CapabilityError(EnKFError, NotImplementedError):
    """The problem does not support the requested operation (e.g. analytic gradients)."""


class RunFailed(EnKFError):
    """Wraps an error raised mid-run together with the partial trace."""

    def __init__(self, cause, trace):
        super().__init__(f"run failed after {len(trace.records)} records: {cause}")
        self.cause = cause
        self.trace = trace
