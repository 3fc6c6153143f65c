"""Exception types shared across modules (the CLI maps them to exit codes)."""

from ectraj.autograd import NumericalError


class ConfigError(ValueError):
    """An invalid or inconsistent configuration, or missing/mismatched inputs."""


__all__ = ["ConfigError", "NumericalError"]
