"""Exception hierarchy for the tracking engine."""
from typing import Iterable, Optional


class StureError(Exception):
    """Base class for every error raised by the package."""


class ParseError(StureError):
    """A file could not be parsed."""

    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ValidationError(StureError):
    """A parsed value violates a domain invariant."""


class ContractViolation(StureError):
    """A precondition of an operation does not hold."""


class ConfigError(StureError):
    """Invalid configuration key or value."""

    def __init__(self, message: str, key: Optional[str] = None, valid_keys: Optional[Iterable[str]] = None):
        self.key = key
        self.valid_keys = sorted(valid_keys) if valid_keys is not None else None
        if self.valid_keys:
            message = f"{message} (valid keys: {', '.join(self.valid_keys)})"
        super().__init__(message)


class DimensionError(StureError):
    """Feature dimension does not match the run configuration."""


class SamplingError(StureError):
    """The dataset cannot provide the requested batch."""


class AlignmentError(StureError):
    """Embeddings and detections are not aligned."""


class DivergenceError(StureError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_good=None):
        self.last_good = last_good
        super().__init__(message)


class UsageError(StureError):
    """Bad command-line usage or missing inputs."""
