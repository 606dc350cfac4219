"""Exception types shared across the package."""


class QbmForgeError(Exception):
    """Base class for all package errors."""


class ValidationError(QbmForgeError, ValueError):
    """Input violates a documented precondition."""


class CapacityError(QbmForgeError):
    """Problem is too large for the dense exact simulator."""


class InternalError(QbmForgeError, RuntimeError):
    """An internal consistency check failed (indicates a bug)."""
