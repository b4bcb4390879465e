"""Exception hierarchy shared by all ctrank modules.

Each class carries the process exit code the CLI maps it to.
"""


class CtrankError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(CtrankError):
    """An operation was called in a way its contract forbids."""

    exit_code = 2


class ConfigError(CtrankError):
    """A configuration value is invalid or inconsistent."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor extents do not line up; the message names both shapes."""


class DataError(CtrankError):
    """Input data violates the format or content contract."""

    exit_code = 3


class NumericError(CtrankError):
    """A numeric value left the finite range."""

    exit_code = 4
