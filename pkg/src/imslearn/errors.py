"""Exception types shared across the package.

The split mirrors how failures are reported to callers: configuration
problems are caller mistakes, data problems come from files or arrays
handed in, numerical problems arise inside otherwise valid computations
(degenerate kernels, non-finite losses, exhausted iteration budgets).
"""


class ImsError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ImsError):
    """Invalid or inconsistent configuration values."""


class DataError(ImsError):
    """Malformed, missing, or out-of-contract input data."""


class NumericalError(ImsError):
    """A computation became degenerate or produced non-finite values."""
