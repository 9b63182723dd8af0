"""Exception hierarchy shared by every module."""


class HyperForecastError(Exception):
    """Base class for all package errors."""


class DimensionError(HyperForecastError, ValueError):
    """Tensor shapes do not agree."""


class ConfigurationError(HyperForecastError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(HyperForecastError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(HyperForecastError, FloatingPointError):
    """A computation produced a non-finite value."""


class DataError(HyperForecastError, ValueError):
    """Input data could not be parsed or is malformed."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column
