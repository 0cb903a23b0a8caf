"""Exception types shared across the package."""


class D2SDKError(Exception):
    """Base class for all package errors."""


class DimensionError(D2SDKError, ValueError):
    pass


class LabelError(D2SDKError, ValueError):
    pass


class ContractError(D2SDKError, RuntimeError):
    pass


class NumericError(D2SDKError, ArithmeticError):
    pass


class ConfigError(D2SDKError, ValueError):
    pass
