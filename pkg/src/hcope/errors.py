"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class HcopeError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(HcopeError, ValueError):
    exit_code = 2


class DatasetFormatError(HcopeError, ValueError):
    """Raised when a dataset file cannot be parsed; carries the line number."""

    exit_code = 2

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SupportViolation(HcopeError, ValueError):
    """An observed action has zero probability under the behavior policy."""

    exit_code = 3

    def __init__(self, message, trajectory=None, step=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step


class NumericFailure(HcopeError, ArithmeticError):
    exit_code = 4


class ZeroWeightError(NumericFailure):
    """Every importance weight in a time-step column is zero."""

    def __init__(self, step):
        super().__init__(f"all importance weights zero at step {step}")
        self.step = step


class ModelError(NumericFailure):
    pass
