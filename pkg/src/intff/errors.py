"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, non-finite numerics exit 3.
"""


class IntFFError(Exception):
    """Base class for all package errors."""


class ShapeError(IntFFError):
    """Operand shapes are inconsistent for the requested operation."""


class ArchParseError(IntFFError):
    """Architecture string could not be parsed.

    Carries the character offset of the offending token.
    """

    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class DataError(IntFFError):
    """Dataset files are missing, truncated, or internally inconsistent."""


class ConfigError(IntFFError):
    """Config file or model file is malformed or has unknown/invalid fields."""


class NumericalOverflowError(IntFFError):
    """A non-finite value (NaN/Inf) appeared where finite values are required."""
