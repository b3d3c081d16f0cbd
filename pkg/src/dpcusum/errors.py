"""Exception types shared across the package.

The CLI maps each family to a stable exit code, so new errors should
subclass one of these rather than raising bare ``ValueError``.
"""


class DpcusumError(Exception):
    """Base class for all package errors."""


class ModelError(DpcusumError, ValueError):
    """Invalid or unsupported distribution / stream model configuration."""


class DimensionError(ModelError):
    """Observation dimension does not match what a stream model expects."""

    def __init__(self, stream, expected, got):
        self.stream = stream
        self.expected = expected
        self.got = got
        super().__init__(
            f"stream {stream!r}: expected observation of dimension {expected}, got {got}"
        )


class PreconditionError(DpcusumError, ValueError):
    """Arguments outside the domain where a formula or procedure is defined."""


class DataError(DpcusumError):
    """Malformed input files, manifests or observation streams."""


class SourceExhausted(DataError):
    """An observation source ran out before the detector alarmed or hit its horizon."""


class NumericalError(DpcusumError, ArithmeticError):
    """A numerical routine failed to reach its tolerance."""


class QuadratureError(NumericalError):
    def __init__(self, message, achieved=None):
        self.achieved = achieved
        if achieved is not None:
            message = f"{message} (achieved error estimate {achieved:.3g})"
        super().__init__(message)


class ConvergenceError(NumericalError):
    """Iterative method (Jacobi sweeps, calibration search) did not converge."""


class DetectorStateError(DpcusumError, RuntimeError):
    """Operation not allowed in the detector's current state (e.g. stepping after an alarm)."""
