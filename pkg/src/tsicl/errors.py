"""Exception types shared across the pipeline, mapped to CLI exit codes."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Malformed or unusable input data (CLI exit code 3)."""


class GeometryError(ValueError):
    """Window/shape arithmetic violation (out-of-range windows, shape mismatch)."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (CLI exit code 4)."""
