"""Exception hierarchy shared by the library and the command line.

Each error carries the exit code the CLI reports for it.
"""
from typing import Any, Dict, Optional


class ArsivaeError(Exception):
    """Base class for every error raised on purpose by arsivae."""

    exit_code: int = 1


class ConfigurationError(ArsivaeError, ValueError):
    """A config record violates its schema or invariants."""

    exit_code = 2


class DataError(ArsivaeError, ValueError):
    """Input data cannot be used as given (bad labels, too few samples...)."""

    exit_code = 2


class NumericalError(ArsivaeError, ArithmeticError):
    """An objective became non-finite."""

    exit_code = 3

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics: Dict[str, Any] = diagnostics or {}


class ArtifactError(ArsivaeError):
    """A stored artifact does not match what the caller needs."""

    exit_code = 4


class CompatibilityError(ArtifactError):
    """Checkpoint parameters or config do not fit the requested architecture."""


class MissingArtifactError(ArtifactError, FileNotFoundError):
    """A checkpoint or dataset directory does not exist."""


class ContractError(ArsivaeError, ValueError):
    """Shapes, dimensions or value ranges violate an operation's contract."""

    exit_code = 4


class PersistenceError(ArsivaeError, OSError):
    """Reading or writing a container failed."""

    exit_code = 5


class ShapeMismatchError(PersistenceError):
    """A blob's byte length disagrees with its manifest shape."""
