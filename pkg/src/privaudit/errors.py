"""Exception hierarchy shared across the toolkit.

The three leaf categories map onto CLI exit codes and HTTP statuses:
ConfigError -> exit 1, DataError -> exit 2, NumericError -> exit 3.
"""


class PrivauditError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PrivauditError):
    """Invalid configuration: bad layer spec, inconsistent shapes at
    construction, unknown config keys, out-of-range hyperparameters."""


class DataError(PrivauditError):
    """Problems with datasets: missing files, malformed binary formats,
    labels out of range, or data that does not match a model's input."""


class NumericError(PrivauditError):
    """Numerical failure during training, e.g. a NaN loss."""
