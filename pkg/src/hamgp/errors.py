"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Inputs disagree on phase-space dimension."""


class FactorizationError(RuntimeError):
    """Cholesky factorization failed even after jitter retries."""


class IntegrationError(RuntimeError):
    """An ODE solve could not proceed.

    ``t_last`` is the last time reached with an accepted step and ``segment``
    names the shooting segment (or lane) when the failure happened inside a
    segmented solve.
    """

    def __init__(self, message, t_last=None, segment=None):
        if segment is not None:
            message = f"{message} (segment {segment})"
        if t_last is not None:
            message = f"{message}; last good time {t_last:.6g}"
        super().__init__(message)
        self.t_last = t_last
        self.segment = segment


class SamplerExhausted(RuntimeError):
    """Rejection sampling ran out of attempts."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in an objective or its gradient."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; ``trace`` holds the history so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
