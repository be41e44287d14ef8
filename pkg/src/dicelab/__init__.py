"""Toy-scale iterative self-distillation of masked-prediction speech encoders, in numpy."""

from .errors import ConfigError, DataError, DiceError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DiceError", "NumericError", "__version__"]
