"""Exception hierarchy shared by every subsystem."""


class FibaError(Exception):
    pass


class DimensionError(FibaError, ValueError):
    pass


class ParameterError(FibaError, ValueError):
    pass


class DegenerateInputError(FibaError, ValueError):
    pass


class ContractError(FibaError, RuntimeError):
    pass


class NumericError(FibaError, ArithmeticError):
    pass


class FormatError(FibaError, ValueError):
    pass


class ChecksumError(FormatError):
    pass


class ConsistencyError(FibaError, RuntimeError):
    pass


class ConfigError(FibaError, ValueError):
    pass
