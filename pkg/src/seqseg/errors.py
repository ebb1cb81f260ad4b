"""Exception types shared across the package.

The CLI maps these onto its exit codes: configuration problems exit 2,
I/O problems exit 3 (plain OSError is used for those), and checkpoint or
dataset compatibility problems exit 4.
"""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class ConfigurationError(ValueError):
    """A config object or config file is invalid."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataError(ValueError):
    """Malformed data, e.g. label ids outside the class range."""


class CompatibilityError(ValueError):
    """Checkpoint and model/dataset do not agree (class counts, shapes)."""
