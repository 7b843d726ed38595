"""Exception hierarchy shared by the package."""

from __future__ import annotations


class LatentREMError(Exception):
    """Base class for all package errors."""

    code = "error"


class DimensionError(LatentREMError, ValueError):
    """Array shapes disagree along a named axis."""

    code = "dimension"

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on axis '{axis}': expected {expected}, got {got}")


class ConfigError(LatentREMError, ValueError):
    code = "config"


class ConvergenceError(LatentREMError, RuntimeError):
    """An inner optimisation did not converge; carries its deviance trace."""

    code = "convergence"

    def __init__(self, message: str, deviance_trace=None):
        super().__init__(message)
        self.deviance_trace = list(deviance_trace or [])


class DivergenceError(LatentREMError, RuntimeError):
    """The filter broke down before any usable EM iterate existed."""

    code = "divergence"

    def __init__(self, message: str, reason: str | None = None, k: int | None = None):
        super().__init__(message)
        self.reason = reason
        self.k = k


class SingularMatrixError(LatentREMError, ArithmeticError):
    """A covariance could not be factorised even after jitter."""

    code = "singular"

    def __init__(self, message: str, k: int | None = None):
        super().__init__(message)
        self.k = k


class IngestError(LatentREMError, ValueError):
    code = "ingest"

    def __init__(self, message: str, lines=None):
        super().__init__(message)
        self.lines = list(lines or [])
