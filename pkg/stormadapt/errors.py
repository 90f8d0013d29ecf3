"""Exception hierarchy shared by every stormadapt module."""

from __future__ import annotations


class StormAdaptError(Exception):
    """Base class for errors raised deliberately by stormadapt."""


class InputError(StormAdaptError, ValueError):
    """The caller passed something invalid (shapes, labels, values, flags)."""


class ConfigError(InputError):
    """Malformed config file, unknown key, or bad override syntax."""


class DatasetError(InputError):
    """A dataset file is missing or cannot be decoded."""

    def __init__(self, path: object, reason: str) -> None:
        self.path = path
        super().__init__(f"{reason}: {path}")


class CheckpointError(InputError):
    """A checkpoint is unreadable or has an unexpected header."""


class TrainingError(StormAdaptError):
    """Training hit a non-finite loss."""
