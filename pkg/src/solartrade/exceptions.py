"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and validation problems
exit with 2, everything else raised at runtime exits with 3.
"""


class SolarTradeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SolarTradeError, ValueError):
    """Bad hyperparameters, dimension mismatches or malformed config files."""


class ValidationError(SolarTradeError, ValueError):
    """Input data violates a documented constraint."""


class ParseError(ValidationError):
    """A CSV row could not be parsed."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ContractViolation(SolarTradeError, RuntimeError):
    """An API was used out of order (e.g. stepping a finished episode)."""


class TrainingDivergence(SolarTradeError, RuntimeError):
    """Training produced a non-finite loss."""
