"""Error taxonomy shared by every module; the CLI maps each class to an exit code."""


class DiceError(Exception):
    kind = "error"
    exit_code = 1


class ConfigError(DiceError, ValueError):
    kind = "config"
    exit_code = 1


class DimensionError(ConfigError):
    """Tensor or feature shapes do not line up."""

    kind = "config"


class DataError(DiceError, ValueError):
    kind = "data"
    exit_code = 2


class LengthError(DataError):
    """Input signal too short for the requested transform."""


class MissingArtifactError(DataError, FileNotFoundError):
    pass


class NumericError(DiceError, ArithmeticError):
    kind = "numeric"
    exit_code = 3
