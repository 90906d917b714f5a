"""Exception types shared across the package.

Three broad kinds, mirrored by the CLI exit codes: usage errors (bad input,
exit 2), numeric errors (a computation failed or left its validity envelope,
exit 1) and resource errors (a guard against absurd requests, exit 1).
"""


class FastslowError(Exception):
    """Base class for all package errors."""


class UsageError(FastslowError):
    """Caller passed something malformed or inconsistent."""


class ExpressionSyntaxError(UsageError):
    """Expression text failed to parse; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DimensionError(UsageError):
    """A variable index or array shape is out of declared range."""


class NumericError(FastslowError):
    """A numeric computation produced an invalid or non-finite result."""


class DomainError(NumericError):
    """Evaluation hit a domain violation (division by zero, sqrt of negative)."""


class ResourceError(FastslowError):
    """Request exceeds a hard resource guard (e.g. tensor node count cap)."""
