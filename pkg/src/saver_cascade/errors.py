"""Exception hierarchy.

Every error the toolkit raises on bad data derives from :class:`DataError`,
which the CLI maps to exit code 2.
"""

from __future__ import annotations


class DataError(ValueError):
    """Base class for invalid inputs."""


class DomainError(DataError):
    """A numeric argument is outside its valid range."""


class ParseError(DataError):
    def __init__(self, reason: str, line_no: int | None = None, source: str | None = None):
        self.reason = reason
        self.line_no = line_no
        self.source = source
        parts = [p for p in (source, None if line_no is None else f"line {line_no}") if p]
        super().__init__(": ".join(parts + [reason]))


class DuplicateIdError(ParseError):
    pass


class EmptyLogError(DataError):
    pass


class JoinError(DataError):
    """Two logs cannot be paired (split or sample-id set mismatch)."""

    def __init__(self, message: str, missing_in_saver=(), missing_in_base=()):
        super().__init__(message)
        self.missing_in_saver = list(missing_in_saver)
        self.missing_in_base = list(missing_in_base)


class EmptySubsetError(DataError):
    """No sample exits at the requested threshold."""


class BackendError(RuntimeError):
    """An inference backend failed to answer a request."""
