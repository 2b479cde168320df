"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class EmissionSRError(Exception):
    exit_code = 1


class ConfigError(EmissionSRError, ValueError):
    exit_code = 2


class DataError(EmissionSRError, ValueError):
    """Malformed input data: bad shapes, non-finite values, corrupt files."""

    exit_code = 3


class DimensionError(DataError):
    pass


class FormatError(DataError):
    """A file failed magic/version/structure validation."""


class NumericError(EmissionSRError, ArithmeticError):
    """Training diverged or an activation went non-finite."""

    exit_code = 4
