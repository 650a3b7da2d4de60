"""
Exception hierarchy for the enhancement toolkit and the classifier that maps
exceptions to CLI exit codes.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence


class EnhanceError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EnhanceError):
    """Raised when tensor shapes are incompatible with an operation."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        self.shapes = [tuple(s) for s in shapes]
        if self.shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message)


class ParameterError(EnhanceError):
    """Raised when a scalar argument is outside its valid range."""


class DomainError(EnhanceError):
    """Raised when a reduction is undefined for its input (e.g. empty tensor)."""


class PairingError(EnhanceError):
    """Raised when two trace records cannot be compared."""


class ConfigError(EnhanceError):
    """Raised when a configuration document is invalid."""

    def __init__(self, message: str, diagnostics: List[str] = None):
        self.diagnostics = list(diagnostics or [])
        if self.diagnostics:
            message = message + ":\n" + "\n".join(f"  - {d}" for d in self.diagnostics)
        super().__init__(message)


class UsageError(EnhanceError):
    """Raised for invalid command-line usage."""


class TraceValidationError(EnhanceError):
    """Raised when a trace violates one or more invariants."""

    def __init__(self, errors: List[str]):
        self.errors = errors
        super().__init__(f"Trace validation failed with {len(errors)} errors:\n" + "\n".join(errors))


class ErrorCategory(Enum):
    USAGE = "usage"
    CONFIG = "config"
    IO = "io"
    NUMERIC = "numeric"
    RUNTIME = "runtime"


EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


@dataclass
class ErrorDiagnosis:
    category: ErrorCategory
    exit_code: int
    message: str
    details: List[str] = field(default_factory=list)


def classify_error(exc: BaseException) -> ErrorDiagnosis:
    """
    Map an exception onto an error category and the CLI exit code contract:
    usage and config problems exit with 2, everything else with 1.
    """
    message = str(exc).split("\n")[0] if str(exc) else type(exc).__name__

    if isinstance(exc, UsageError):
        return ErrorDiagnosis(ErrorCategory.USAGE, EXIT_USAGE, message)

    if isinstance(exc, ConfigError):
        return ErrorDiagnosis(ErrorCategory.CONFIG, EXIT_USAGE, message, exc.diagnostics)

    # Missing config files arrive here as ConfigError, not OSError.
    if isinstance(exc, OSError):
        return ErrorDiagnosis(ErrorCategory.IO, EXIT_RUNTIME, message)

    if isinstance(exc, (DimensionError, ParameterError, DomainError, FloatingPointError)):
        return ErrorDiagnosis(ErrorCategory.NUMERIC, EXIT_RUNTIME, message)

    if isinstance(exc, TraceValidationError):
        return ErrorDiagnosis(ErrorCategory.NUMERIC, EXIT_RUNTIME, message, exc.errors)

    return ErrorDiagnosis(ErrorCategory.RUNTIME, EXIT_RUNTIME, message)
