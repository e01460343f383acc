"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so new errors should
subclass one of the three families below rather than ``Exception``.
"""


class PolyVGAEError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(PolyVGAEError, ValueError):
    """Invalid configuration, missing weights, unsupported capability."""


class DataError(PolyVGAEError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class SchemaError(DataError):
    pass


class DimensionError(DataError):
    pass


class NumericalError(PolyVGAEError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class ShapeError(PolyVGAEError, ValueError):
    """Operands of an op have incompatible shapes."""


class UndefinedMetricError(PolyVGAEError, ValueError):
    """A metric is mathematically undefined for the given input."""
