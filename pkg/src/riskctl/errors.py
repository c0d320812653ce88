"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data/file problems with 3, numeric failures with 4.
"""


class RiskctlError(Exception):
    """Base class for all package errors."""


class ConfigError(RiskctlError):
    """Invalid configuration, parameters, or objective composition."""


class DataError(RiskctlError):
    """Bad or inconsistent on-disk data (datasets, checkpoints, records)."""


class DatasetFormatError(DataError):
    """Dataset file failed header or body validation."""


class NumericError(RiskctlError):
    """Numeric failure during simulation, training, or solving."""


class ConstraintViolationError(NumericError):
    """An action fell outside its admissible set (test/validation paths only)."""
