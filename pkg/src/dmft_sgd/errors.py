"""Exception types shared across the package."""


class DmftSgdError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DmftSgdError, ValueError):
    """Raised when a numerical input is non-finite or malformed."""


class StructuralError(DmftSgdError, ValueError):
    """Shape, causality, or grid mismatch between kernel objects."""


class UnsupportedModelError(DmftSgdError, ValueError):
    """An analytic map was requested for a model family it does not cover."""


class KernelNotPSDError(DmftSgdError, RuntimeError):
    """Cholesky failed on a covariance kernel even after maximal jitter."""


class DivergenceError(DmftSgdError, RuntimeError):
    """A simulated trajectory left the admissible region."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonConvergenceError(DmftSgdError, RuntimeError):
    """Fixed-point iteration diverged; carries the distance trace."""

    def __init__(self, message, distances=None):
        super().__init__(message)
        self.distances = list(distances) if distances is not None else []


class ConfigError(DmftSgdError, ValueError):
    """Experiment configuration failed to parse or validate."""
