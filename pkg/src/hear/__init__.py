"""Decoupled acoustic/task audio representation learning with a cost profiler."""

from .errors import ConfigError, DataError, HearError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "HearError", "NumericError", "__version__"]
