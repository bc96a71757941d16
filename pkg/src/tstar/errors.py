"""Exception hierarchy; each class maps to one CLI exit code."""


class TStarError(Exception):
    exit_code = 1


class ConfigError(TStarError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 1


class DataError(TStarError, ValueError):
    """Input data is missing, malformed or does not cover the grid."""

    exit_code = 2


class DivergenceError(TStarError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""

    exit_code = 3
