"""Multilevel saliency stacks: external map ingestion and a built-in multiscale proxy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from cutswap.dataset.imageio import grayscale, load_gray, resample_bilinear
from cutswap.models import ImageArray, SaliencyMap, SaliencyStack
from cutswap.services.exceptions import DegenerateMapError, MissingArtifactError

LOGGER = logging.getLogger(__name__)

DEFAULT_TOTAL_LEVELS = 30
DEFAULT_INDICES = (4, 9, 16, 23, 30)
DEFAULT_SIGMA_MIN = 0.5
DEFAULT_SIGMA_MAX = 8.0
DEGENERATE_RANGE = 1e-12


def normalize_map(level_index: int, values: NDArray[np.float64]) -> SaliencyMap:
    """Min-max normalize one map; constant maps become an all-zero degenerate map."""
    if not np.all(np.isfinite(values)):
        raise ValueError(f"Saliency level {level_index} contains non-finite values.")
    low, high = float(values.min()), float(values.max())
    if high - low <= DEGENERATE_RANGE:
        return SaliencyMap(level_index=level_index, data=np.zeros_like(values), degenerate=True)
    return SaliencyMap(level_index=level_index, data=(values - low) / (high - low))


def _check_indices(indices: Sequence[int], total_levels: int) -> tuple[int, ...]:
    ordered = tuple(int(index) for index in indices)
    if not ordered:
        raise ValueError("At least one saliency level must be selected.")
    if any(index < 1 or index > total_levels for index in ordered):
        raise ValueError(f"Level indices {ordered} must lie in [1, {total_levels}].")
    if any(b <= a for a, b in zip(ordered, ordered[1:])):
        raise ValueError(f"Level indices must be strictly increasing, got {ordered}.")
    return ordered


def level_sigma(
    level_index: int,
    total_levels: int,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    sigma_max: float = DEFAULT_SIGMA_MAX,
) -> float:
    """Blur scale for a level: ``sigma_min`` at level 1, ``sigma_max`` at level N."""
    if total_levels <= 1:
        return sigma_min
    return sigma_min + (sigma_max - sigma_min) * (level_index - 1) / (total_levels - 1)


def builtin_multiscale_saliency(
    img: ImageArray,
    indices: Sequence[int],
    total_levels: int = DEFAULT_TOTAL_LEVELS,
    *,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    sigma_max: float = DEFAULT_SIGMA_MAX,
) -> SaliencyStack:
    """Gradient magnitude of the blurred gray image, one blur scale per level.

    Fine levels (small index) keep edges sharp; coarse levels spread the
    response over a wider area, mimicking attention maps taken near the
    input and near the output of a CNN.
    """
    ordered = _check_indices(indices, total_levels)
    gray = grayscale(img)
    maps = []
    for level_index in ordered:
        sigma = level_sigma(level_index, total_levels, sigma_min, sigma_max)
        blurred = ndimage.gaussian_filter(gray, sigma, mode="nearest")
        magnitude = np.hypot(
            ndimage.sobel(blurred, axis=0, mode="nearest"),
            ndimage.sobel(blurred, axis=1, mode="nearest"),
        )
        maps.append(normalize_map(level_index, magnitude))
    degenerate = [m.level_index for m in maps if m.degenerate]
    if degenerate:
        LOGGER.debug("Degenerate saliency levels %s (constant input region)", degenerate)
    return SaliencyStack(maps=tuple(maps), total_levels=total_levels, selected_indices=ordered)


def level_filename(image_stem: str, level_index: int) -> str:
    return f"{image_stem}_layer{level_index}.png"


def load_saliency_stack(
    directory: Path,
    image_stem: str,
    indices: Sequence[int],
    *,
    total_levels: int = DEFAULT_TOTAL_LEVELS,
    size: tuple[int, int] | None = None,
) -> SaliencyStack:
    """Read ``<stem>_layer<idx>.png`` maps exported by an external extractor.

    Each map is resized to ``size`` when given and min-max normalized on
    its own; constant maps are flagged degenerate.
    """
    ordered = _check_indices(indices, total_levels)
    maps = []
    for level_index in ordered:
        path = Path(directory) / level_filename(image_stem, level_index)
        if not path.is_file():
            raise MissingArtifactError(f"Saliency level file missing: {path}")
        values = load_gray(path)
        if size is not None and values.shape != size:
            values = resample_bilinear(values, size[0], size[1])
        saliency_map = normalize_map(level_index, values)
        if saliency_map.degenerate:
            LOGGER.warning("Saliency map %s is constant; level flagged degenerate", path)
        maps.append(saliency_map)
    return SaliencyStack(maps=tuple(maps), total_levels=total_levels, selected_indices=ordered)


def select_subset(stack: SaliencyStack, indices: Sequence[int]) -> SaliencyStack:
    """Restrict a stack to the requested levels, keeping coarse-to-fine order."""
    wanted = set(int(index) for index in indices)
    missing = sorted(wanted - set(stack.selected_indices))
    if missing:
        raise KeyError(f"Levels {missing} are not present in the stack.")
    maps = tuple(m for m in stack.maps if m.level_index in wanted)
    return SaliencyStack(
        maps=maps,
        total_levels=stack.total_levels,
        selected_indices=tuple(m.level_index for m in maps),
    )


def require_usable(saliency_map: SaliencyMap) -> None:
    """Raise :class:`DegenerateMapError` for maps without intensity variation."""
    if saliency_map.degenerate:
        raise DegenerateMapError(f"Saliency level {saliency_map.level_index} is degenerate.")


@dataclass(frozen=True)
class BuiltinSaliencyProvider:
    """Deterministic multiscale gradient proxy."""

    indices: tuple[int, ...] = DEFAULT_INDICES
    total_levels: int = DEFAULT_TOTAL_LEVELS
    sigma_min: float = DEFAULT_SIGMA_MIN
    sigma_max: float = DEFAULT_SIGMA_MAX
    name: str = "builtin"

    def stack_for(self, image: ImageArray, image_stem: str) -> SaliencyStack:
        del image_stem
        return builtin_multiscale_saliency(
            image,
            self.indices,
            self.total_levels,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
        )


@dataclass(frozen=True)
class ExternalSaliencyProvider:
    """Maps exported by an external extractor such as LayerCAM."""

    directory: Path
    indices: tuple[int, ...] = DEFAULT_INDICES
    total_levels: int = DEFAULT_TOTAL_LEVELS
    name: str = "external"

    def stack_for(self, image: ImageArray, image_stem: str) -> SaliencyStack:
        return load_saliency_stack(
            self.directory,
            image_stem,
            self.indices,
            total_levels=self.total_levels,
            size=(int(image.shape[0]), int(image.shape[1])),
        )
