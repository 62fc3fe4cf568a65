"""Domain-specific exceptions raised across the pipeline."""

from __future__ import annotations

from typing import Any


class CutSwapError(Exception):
    """Root of every error raised deliberately by this package."""


class ConfigError(CutSwapError, ValueError):
    """Raised when a configuration file, section or override is invalid."""


class MissingArtifactError(CutSwapError, FileNotFoundError):
    """Raised when a stage needs an artifact an earlier stage has not written."""


class ArtifactFormatError(CutSwapError):
    """Raised when a checkpoint or bank file is truncated or malformed."""


class ChecksumMismatchError(ArtifactFormatError):
    """Raised when a memory bank was built by a different encoder."""


class DatasetError(CutSwapError):
    """Raised when a dataset tree violates the expected layout."""


class ImageFormatError(DatasetError):
    """Raised when a raster cannot be decoded into a three-channel image."""


class DegenerateMapError(CutSwapError):
    """Raised when a saliency map carries no usable intensity variation."""


class LevelSkipError(CutSwapError):
    """Raised when one saliency level cannot yield a negative sample."""


class NumericFailureError(CutSwapError, ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""


class TrainingDivergedError(NumericFailureError):
    """Raised when training diverges; carries the last finite parameters."""

    def __init__(self, message: str, *, epoch: int, last_good: Any = None) -> None:
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good
