from __future__ import annotations

from typing import Optional, Tuple


class TEDepthError(Exception):
    """Base class for all errors raised by the depth ensemble library."""


class ShapeError(TEDepthError, ValueError):
    """Tensor or array shapes do not satisfy an operation's contract."""


class DomainError(TEDepthError, ValueError):
    """A value lies outside the domain of an operation (log of <= 0, ...)."""

    def __init__(self, message: str, index: Optional[Tuple[int, ...]] = None):
        if index is not None:
            message = f"{message} at index {tuple(int(i) for i in index)}"
        super().__init__(message)
        self.index = index


class EmptyMaskError(TEDepthError, ValueError):
    """No valid pixel is left to compute a loss or metric over."""


class GradCheckError(TEDepthError, ArithmeticError):
    """Finite differences produced a non-finite value."""


class CodecError(TEDepthError, ValueError):
    """An image or depth file is malformed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(TEDepthError, ValueError):
    """A checkpoint file is corrupted, truncated or of an unknown version."""


class TrainingDivergedError(TEDepthError, RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, task: str, message: str):
        super().__init__(f"{task}: {message}")
        self.task = task


class ConfigError(TEDepthError, ValueError):
    """An experiment configuration is malformed or names an unknown key."""
