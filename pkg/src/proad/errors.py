"""Exception hierarchy shared by every proad module."""


class ProADError(Exception):
    """Base class for all library errors."""


class DimensionError(ProADError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ProADError, ValueError):
    """A scalar or buffer argument is outside its valid range."""


class UsageError(ProADError):
    """An API was called in a way its contract forbids."""


class ConfigurationError(ProADError, ValueError):
    """A model, training or run configuration is invalid."""


class SpecError(ConfigurationError):
    """A dataset specification is invalid."""


class IngestionError(ProADError):
    """An on-disk dataset could not be read."""


class MetricError(ProADError, ValueError):
    """A metric is undefined for the given scores/labels."""


class NumericalError(ProADError, ArithmeticError):
    """Training produced a non-finite value."""
