"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


class SchemaError(ValueError):
    """Input data violates a file format or graph schema."""


class GenerationError(ValueError):
    """A synthetic dataset specification cannot be realized."""


class UnsupportedDatasetError(ValueError):
    """The dataset lacks information an analysis needs."""


class ConfigError(ValueError):
    """A configuration field holds an invalid value."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
