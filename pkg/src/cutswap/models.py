"""Shared value objects and protocols used across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

ImageArray = NDArray[np.float64]
"""H x W x 3 float64 array with values in [0, 1]."""

MaskArray = NDArray[np.bool_]
"""H x W boolean array, True marks anomalous pixels."""

Coord = tuple[int, int]


class ProgressReporter(Protocol):  # pylint: disable=too-few-public-methods
    """Callable used to surface stage progress to the caller."""

    def __call__(self, message: str, percent_complete: float | None = None) -> None:
        ...


def silent_progress(message: str, percent_complete: float | None = None) -> None:
    """Progress reporter that discards every update."""
    del message, percent_complete


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """One min-max normalized saliency map at a given network level."""

    level_index: int
    data: NDArray[np.float64]
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.data.shape[0]), int(self.data.shape[1]))


@dataclass(frozen=True, eq=False)
class SaliencyStack:
    """Ordered coarse-to-fine maps for the selected levels of one image."""

    maps: tuple[SaliencyMap, ...]
    total_levels: int
    selected_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        indices = self.selected_indices
        if len(indices) != len(self.maps):
            raise ValueError("selected_indices must name exactly one level per map.")
        if len(indices) > self.total_levels:
            raise ValueError("Cannot select more levels than the stack holds.")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"selected_indices must be strictly increasing, got {indices}.")
        if any(index < 1 or index > self.total_levels for index in indices):
            raise ValueError(f"selected_indices must lie in [1, {self.total_levels}].")
        if tuple(m.level_index for m in self.maps) != indices:
            raise ValueError("Map level indices disagree with selected_indices.")
        shapes = {m.shape for m in self.maps}
        if len(shapes) > 1:
            raise ValueError(f"All saliency maps must share dimensions, got {sorted(shapes)}.")

    @property
    def selected_count(self) -> int:
        return len(self.selected_indices)

    def level(self, index: int) -> SaliencyMap:
        """Return the map for ``index`` or raise ``KeyError``."""
        for saliency_map in self.maps:
            if saliency_map.level_index == index:
                return saliency_map
        raise KeyError(f"Level {index} is not part of this stack.")


class SaliencyProvider(Protocol):  # pylint: disable=too-few-public-methods
    """Strategy interface producing the saliency stack for one normal sample."""

    name: str

    def stack_for(self, image: ImageArray, image_stem: str) -> SaliencyStack:
        """Return the selected saliency levels for ``image``."""
        raise NotImplementedError
