"""Exception hierarchy shared by every subsystem.

Each class carries a short ``category`` string that the command line prints
on failure so callers can parse the failure kind without scraping messages.
"""


class DCComixError(Exception):
    category = "error"


class InvalidInputError(DCComixError, ValueError):
    category = "invalid_input"


class ConfigurationError(DCComixError, ValueError):
    category = "configuration"


class EnvironmentUnavailableError(DCComixError, RuntimeError):
    """An optional external dependency (pretrained model, package) is missing."""

    category = "environment"


class NumericError(DCComixError, ArithmeticError):
    category = "numeric"
