"""Exception types shared across the package."""


class CooptError(Exception):
    """Base class for package errors."""


class ConfigurationError(CooptError):
    """Shapes, widths, schemas or option values do not line up."""


class NumericError(CooptError):
    """A computation produced or received non-finite / degenerate values."""


class UsageError(CooptError):
    """An API contract was violated (e.g. a gradient tape reused)."""


class DomainError(CooptError):
    """An argument lies outside the mathematical domain of an operation."""
