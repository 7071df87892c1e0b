"""Exception types shared across the package.

Plain ValueError is used for invalid arguments; the classes here exist so
the CLI can map failures to distinct exit codes.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names both operands."""


class ConfigError(Exception):
    """Bad configuration file, unknown key, or checkpoint/config mismatch."""


class DataError(Exception):
    """Malformed or missing input data."""


class NumericError(Exception):
    """Non-finite values or a failed numeric self-check."""
