"""Exception types shared across the package.

All errors raised on purpose derive from ScdError so callers (and the CLI)
can catch one base class and print a single-line message.
"""


class ScdError(Exception):
    """Base class for all package-defined errors."""


class ConfigError(ScdError):
    """Invalid or inconsistent configuration value."""


class ShapeError(ScdError):
    """Tensor or array shape violates an interface contract."""


class DataError(ScdError):
    """Dataset content problem: missing files, bad labels, bad palette."""


class NumericsError(ScdError):
    """Non-finite values where finite ones are required."""
