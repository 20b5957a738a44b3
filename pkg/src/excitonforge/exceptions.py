from typing import Optional


class ExcitonForgeError(Exception):
    """Base class for all errors raised by the library."""


class ConfigError(ExcitonForgeError, ValueError):
    """A run configuration value is unknown or out of range."""


class ConvergenceError(ExcitonForgeError):
    """An iterative procedure stopped before meeting its tolerance."""

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


class StoreError(ExcitonForgeError):
    """A structure store could not be written or failed its integrity check."""

    def __init__(self, message: str, resumable: bool = True):
        super().__init__(message)
        self.resumable = resumable
