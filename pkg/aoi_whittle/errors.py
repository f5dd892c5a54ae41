"""Exceptions raised by the scheduling models and the experiment harness."""


class AoIError(Exception):
    """Base class for all package errors."""
    pass


class InvalidParameterError(AoIError, ValueError):
    """Raised when an argument or configuration violates a precondition."""
    pass


class ConvergenceError(AoIError):
    """Raised when an iterative oracle does not converge within its cap."""
    pass


class FluidStateError(AoIError):
    """Raised when a fluid state holds NaN or negative mass."""
    pass


class SpecFileError(AoIError):
    """Raised when an experiment or initial-state file cannot be read."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(location + message)


class AcceptanceError(AoIError):
    """Raised when a --check acceptance criterion fails."""
    pass
