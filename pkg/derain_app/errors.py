"""Exceptions raised across the package.

Every error the CLI should turn into exit code 2 derives from DerainError.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence


class DerainError(Exception):
    """Base class for runtime failures."""


class ShapeError(DerainError, ValueError):
    def __init__(self, op: str, message: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shown = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message} (shapes: {shown})" if shown else f"{op}: {message}")


class PoolIndicesError(DerainError, IndexError):
    pass


class ConfigError(DerainError, ValueError):
    pass


class TapeError(DerainError, RuntimeError):
    pass


class ImageLoadError(DerainError):
    def __init__(self, path: str | Path, reason: str):
        self.path = Path(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class DatasetError(DerainError):
    def __init__(self, message: str, unpaired: Sequence[str] = ()):
        self.unpaired = list(unpaired)
        if self.unpaired:
            message = f"{message}: {', '.join(self.unpaired)}"
        super().__init__(message)


class CheckpointError(DerainError):
    pass


class NonFiniteGradientError(DerainError, FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter '{name}'")


class TrainingDivergedError(DerainError):
    def __init__(self, step: int, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        where = f"; last good parameters in {checkpoint}" if checkpoint else ""
        super().__init__(f"loss became NaN at step {step}{where}")
