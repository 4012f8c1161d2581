"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class BsnnError(Exception):
    """Base class for all package errors."""


class ContractViolation(BsnnError):
    """An operation was called with mismatched shapes or inconsistent state."""


class NumericError(BsnnError):
    """Non-finite values entered or left a numeric kernel."""


class DataError(BsnnError):
    """A dataset file is missing, malformed, or inconsistent."""


class ConfigError(BsnnError):
    """An experiment configuration failed parsing or validation."""
