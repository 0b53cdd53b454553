class MSBTError(Exception):
    """Base class for all package errors."""


class DimensionError(MSBTError, ValueError):
    pass


class DomainError(MSBTError, ValueError):
    pass


class ContractError(MSBTError, ValueError):
    pass


class ConfigurationError(MSBTError, ValueError):
    pass


class LoadError(MSBTError):
    pass


class CorruptCheckpointError(LoadError):
    pass


class UndefinedMetricError(MSBTError, ValueError):
    pass
