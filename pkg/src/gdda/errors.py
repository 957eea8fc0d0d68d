"""Exception hierarchy shared across the pipeline."""


class GddaError(Exception):
    exit_code = 1


class ConfigError(GddaError, ValueError):
    exit_code = 2


class UsageError(GddaError, ValueError):
    exit_code = 2


class ShapeError(GddaError, ValueError):
    exit_code = 2


class ValidationError(GddaError, ValueError):
    exit_code = 2


class DatasetFormatError(GddaError, ValueError):
    exit_code = 2


class NumericError(GddaError, ArithmeticError):
    exit_code = 3


class DegenerateProjectionError(NumericError):
    pass


class MissingArtifactError(GddaError, FileNotFoundError):
    exit_code = 4
