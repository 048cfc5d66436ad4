"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so new error conditions
should subclass one of the three top branches rather than raising bare
ValueError.
"""


class ComprfError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ComprfError):
    """Invalid parameters or parameter combinations."""


class DataError(ComprfError):
    """A dataset or matrix file could not be loaded or validated."""


class OracleError(ComprfError):
    """A comparison backend could not be constructed or cannot answer a query."""


class TaskMismatchError(ConfigError):
    """Model task (classification/regression) does not match the request."""


class ModelFormatError(ComprfError):
    """A model file is unreadable: bad magic, version, or truncation."""


class FingerprintMismatchError(ModelFormatError):
    """Model was trained on a different dataset than the one supplied."""
