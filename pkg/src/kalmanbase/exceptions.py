"""Error classes shared across the package.

The CLI maps each class to a distinct exit code.
"""


class KalmanBaseError(Exception):
    exit_code = 1


class ConfigError(KalmanBaseError, ValueError):
    """Invalid configuration or hyperparameters."""

    exit_code = 2


class DataError(KalmanBaseError, ValueError):
    """Malformed or insufficient input data."""

    exit_code = 3


class NumericalError(KalmanBaseError, ArithmeticError):
    """Singular innovation covariance, NaN loss or gradient, divergence."""

    exit_code = 4
