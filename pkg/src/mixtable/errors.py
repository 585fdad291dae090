"""Exception hierarchy. Each family maps to one CLI exit code."""


class MixTableError(Exception):
    exit_code = 1


class ConfigError(MixTableError, ValueError):
    exit_code = 2


class DataError(MixTableError, ValueError):
    exit_code = 3


class ProviderError(MixTableError, RuntimeError):
    exit_code = 4


class NumericError(MixTableError, ArithmeticError):
    exit_code = 5


class ShapeError(MixTableError, ValueError):
    exit_code = 5


class GraphError(MixTableError, RuntimeError):
    exit_code = 5
