"""Shared exception types."""


class ConfigError(Exception):
    """Invalid configuration value; maps to CLI exit code 2."""


class CapacityError(ValueError):
    """Sequence exceeds the model's maximum caption length."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""
