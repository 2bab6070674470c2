"""Shared exception types."""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected shapes."""


class ConfigError(ValueError):
    """A configuration value is invalid or unsatisfiable."""
