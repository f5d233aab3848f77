"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class NightliftError(Exception):
    exit_code = 1


class ConfigError(NightliftError, ValueError):
    exit_code = 2


class ShapeError(NightliftError, ValueError):
    exit_code = 3


class DataError(NightliftError, ValueError):
    exit_code = 3


class CompatibilityError(ConfigError):
    """Checkpoint and configuration disagree (e.g. kernel size)."""


class NumericError(NightliftError, ArithmeticError):
    exit_code = 4


class StateError(NightliftError, RuntimeError):
    exit_code = 1
