"""Exception hierarchy.

Input and configuration faults derive from ``InputError``; the CLI maps them
to exit code 2. Numeric faults map to exit code 1.
"""


class StgcastError(Exception):
    """Base class for all package errors."""


class InputError(StgcastError):
    """Bad input data or configuration (CLI exit code 2)."""


class ShapeError(InputError, ValueError):
    pass


class ContractError(InputError, ValueError):
    """A documented precondition was violated."""


class DegenerateGraphError(InputError):
    pass


class NoOverlapError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class GridError(InputError):
    """Timestamps not on a uniform 15-minute grid."""


class EmptyTableError(InputError):
    pass


class DegenerateStatsError(InputError):
    pass


class DegenerateInputError(InputError):
    pass


class UndefinedMetricError(InputError):
    pass


class BlockShapeError(InputError):
    pass


class CompatibilityError(InputError):
    pass


class ConfigError(InputError):
    pass


class NumericFaultError(StgcastError, ArithmeticError):
    """Non-finite values during training (CLI exit code 1)."""
