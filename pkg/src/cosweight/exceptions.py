"""Exception hierarchy.

Each top-level family maps to a CLI exit code: configuration problems exit
with 2, data problems with 3 and numerical failures with 4.
"""


class CosError(Exception):
    exit_code = 1


class ConfigError(CosError):
    exit_code = 2


class UnsupportedEstimandError(ConfigError):
    pass


class DataError(CosError):
    exit_code = 3


class SchemaError(DataError):
    pass


class StructuralError(DataError):
    pass


class ParseError(DataError):
    pass


class NumericalError(CosError):
    exit_code = 4


class SeparationError(NumericalError):
    pass


class SingularDesignError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    pass


class InfeasibleBalanceError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class InferenceError(NumericalError):
    pass


class InfeasibleRatioError(NumericalError):
    pass
