"""Exception types raised across the package."""


class WeatherSRError(Exception):
    """Base class for all package errors."""


class ConfigurationError(WeatherSRError, ValueError):
    pass


class ShapeError(WeatherSRError, ValueError):
    pass


class DomainError(WeatherSRError, ValueError):
    pass


class ContractError(WeatherSRError, ValueError):
    pass


class DataError(WeatherSRError, ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class DegenerateDataError(DataError):
    pass


class NumericError(WeatherSRError, ArithmeticError):
    """Non-finite value encountered; ``where`` carries the iteration or timestep."""

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where
