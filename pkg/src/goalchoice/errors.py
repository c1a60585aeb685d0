"""Exception hierarchy shared across the package."""


class GoalChoiceError(Exception):
    """Base class for all package errors."""


class ConfigError(GoalChoiceError, ValueError):
    pass


class ContractError(GoalChoiceError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(ContractError):
    pass


class NumericError(GoalChoiceError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class NonConvergence(NumericError):
    pass


class DataError(GoalChoiceError):
    """Problems with input data files."""


class IoError(DataError, OSError):
    pass


class SchemaError(DataError):
    pass


class OrderError(DataError):
    pass


class MissingObservation(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class IdentifiabilityWarning(UserWarning):
    pass
