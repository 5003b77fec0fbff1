"""Exception hierarchy shared across the package."""


class NeuroprogError(Exception):
    """Base class for all package errors."""


class DimensionError(NeuroprogError):
    """Shapes or axes do not line up for an operation."""


class DegenerateBatchError(DimensionError):
    """Batch statistics requested over fewer than two elements."""


class ContractError(NeuroprogError):
    """A caller violated an API precondition."""


class DataError(NeuroprogError):
    """Input data is malformed or out of range."""


class ConfigError(NeuroprogError):
    """Invalid or inconsistent configuration."""


class UndefinedMetricError(NeuroprogError):
    """A metric has no defined value for the given inputs."""
