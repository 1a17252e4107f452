"""Exception types mapped to CLI exit codes (config=2, data=3, numerical=4)."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(Exception):
    """Missing or malformed dataset files."""

    exit_code = 3


class NumericalError(Exception):
    """Numerical failure (non-SPD covariance, collapsed likelihood, ...)."""

    exit_code = 4
