class SmrError(Exception):
    """Base error. Carries a machine-readable code and the CLI exit status."""

    code = "ERROR"
    exit_status = 1


class ConfigError(SmrError, ValueError):
    code = "CONFIG_ERROR"
    exit_status = 2


class DataError(SmrError, ValueError):
    code = "DATA_ERROR"
    exit_status = 3


class NumericalError(SmrError, ArithmeticError):
    code = "NUMERICAL_ERROR"
    exit_status = 4
