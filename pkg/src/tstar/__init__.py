"""Two-stage probabilistic forecasting of 15-minute bike-share demand."""

from .errors import ConfigError, DataError, DivergenceError, TStarError

__all__ = ["ConfigError", "DataError", "DivergenceError", "TStarError"]
__version__ = "0.1.0"
