"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor or data shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class ContractError(RuntimeError):
    """Raised when an operation's precondition is violated."""


class FormatError(ValueError):
    """Raised when a file does not match its expected binary/text format."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = path
        self.offset = offset


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up during training."""
