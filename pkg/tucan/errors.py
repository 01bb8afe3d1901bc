"""Exception types shared across the package.

Each error also derives from the builtin it refines so callers that only know
``ValueError``/``RuntimeError`` keep working.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional


class TucanError(Exception):
    """Base class for every error raised by tucan."""


class ConfigError(TucanError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None) -> None:
        super().__init__(message)
        self.key = key


class ShapeError(TucanError, ValueError):
    pass


class InputError(TucanError, ValueError):
    pass


class HeadStateError(TucanError, RuntimeError):
    pass


class DatasetError(TucanError):
    pass


class CheckpointError(TucanError):
    pass


class TrainingDivergedError(TucanError, RuntimeError):
    def __init__(self, message: str, checkpoint_path: Optional[Path] = None) -> None:
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
