"""Exception types shared across the package."""


class LrImputeError(Exception):
    """Base class for all package errors."""


class DimensionError(LrImputeError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(LrImputeError, ValueError):
    """A documented precondition was violated."""


class ParseError(LrImputeError, ValueError):
    """A data or config file could not be parsed."""


class ConfigError(LrImputeError, ValueError):
    """Invalid run configuration (CLI exit code 3)."""


class NumericError(LrImputeError, ArithmeticError):
    """An iterative numeric routine failed to converge."""


class TrainingDiverged(LrImputeError, RuntimeError):
    """Loss became non-finite (CLI exit code 2).

    Carries the last finite parameter snapshot so callers can checkpoint it.
    """

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []
