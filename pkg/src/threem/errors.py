"""Exception hierarchy shared by every module.

Each class maps to one CLI exit status (see ``threem.cli``).
"""


class ThreeMError(Exception):
    exit_code = 1


class DimensionError(ThreeMError, ValueError):
    """Operand shapes do not conform."""

    exit_code = 5


class ParameterError(ThreeMError, ValueError):
    """An argument is outside its admissible range."""

    exit_code = 2


class ContractError(ThreeMError, ValueError):
    """A precondition of an operation is violated."""

    exit_code = 5


class DataError(ThreeMError):
    """Malformed or inconsistent input files."""

    exit_code = 3


class NumericError(ThreeMError, ArithmeticError):
    """Non-finite values or failed numerical checks."""

    exit_code = 4


class UsageError(ThreeMError):
    exit_code = 2
