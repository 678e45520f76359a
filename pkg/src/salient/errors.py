"""Exception hierarchy.

Each class carries the CLI exit code it maps to, so ``cli.main`` can translate
any failure without a lookup table.
"""


class SalientError(Exception):
    exit_code = 3


class ConfigError(SalientError):
    exit_code = 2


class ValidationError(SalientError, ValueError):
    exit_code = 3


class DimensionError(ValidationError):
    pass


class FormatError(SalientError):
    exit_code = 3


class GenerationError(SalientError):
    exit_code = 3


class PlacementError(GenerationError):
    pass


class NumericalError(SalientError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericalError):
    pass


class SamplingError(NumericalError):
    pass
