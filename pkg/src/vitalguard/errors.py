"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ParseError(ValueError):
    """An input file could not be parsed; message carries the location."""


class CalibrationError(ValueError):
    """Channel statistics cannot be calibrated (e.g. zero variance)."""
