"""Seeded synthetic benchmark categories with planted defects and exact masks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from cutswap.dataset.imageio import save_image, save_mask
from cutswap.dataset.layout import DatasetIndex, scan_dataset
from cutswap.models import ImageArray, MaskArray
from cutswap.services.exceptions import ConfigError, DatasetError
from cutswap.utils.seeding import make_rng

LOGGER = logging.getLogger(__name__)

TEXTURES = ("stripes", "noise")
DEFECTS = ("blob", "scratch")

BACKGROUND_LEVEL = 0.12
NOISE_TEXTURE_SIGMA = 2.0
PIXEL_NOISE = 0.01


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of one synthetic category."""

    category: str = "synthetic"
    image_size: int = 128
    n_train: int = 20
    n_test_normal: int = 10
    n_test_anomalous: int = 10
    texture: str = "stripes"
    defect: str = "blob"
    defect_delta: float = 0.35
    defect_radius: int = 6
    scratch_length: int = 24
    scratch_width: int = 3
    object_fraction: float = 0.7
    stripe_period: float = 8.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"synth.image_size must be >= 8, got {self.image_size}")
        if min(self.n_train, self.n_test_normal, self.n_test_anomalous) < 0:
            raise ConfigError("synth image counts must be non-negative")
        if self.texture not in TEXTURES:
            raise ConfigError(f"synth.texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.defect not in DEFECTS:
            raise ConfigError(f"synth.defect must be one of {DEFECTS}, got {self.defect!r}")
        if not 0.0 < self.object_fraction <= 1.0:
            raise ConfigError(
                f"synth.object_fraction must be in (0, 1], got {self.object_fraction}"
            )
        if self.defect_radius < 0 or self.scratch_length < 1 or self.scratch_width < 1:
            raise ConfigError("synth defect dimensions must be positive")
        if self.stripe_period <= 0:
            raise ConfigError(f"synth.stripe_period must be > 0, got {self.stripe_period}")

    @property
    def object_bounds(self) -> tuple[int, int]:
        """First and last pixel (inclusive) of the centered square object."""
        side = max(1, int(round(self.image_size * self.object_fraction)))
        start = (self.image_size - side) // 2
        return start, start + side - 1

    @property
    def defect_extent(self) -> int:
        """Side of the square a defect needs inside the object."""
        if self.defect == "blob":
            return 2 * self.defect_radius + 1
        return self.scratch_length + self.scratch_width


def disk_mask(shape: tuple[int, int], center: tuple[int, int], radius: float) -> MaskArray:
    """Pixels whose lattice distance to ``center`` is at most ``radius``."""
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2


def segment_mask(
    shape: tuple[int, int],
    start: tuple[float, float],
    end: tuple[float, float],
    width: float,
) -> MaskArray:
    """Pixels within ``width / 2`` of the segment from ``start`` to ``end``."""
    rows, cols = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    seg = np.array(end) - np.array(start)
    length_sq = float(seg @ seg)
    if length_sq == 0.0:
        t = np.zeros(shape)
    else:
        t = ((rows - start[0]) * seg[0] + (cols - start[1]) * seg[1]) / length_sq
        t = np.clip(t, 0.0, 1.0)
    nearest_r = start[0] + t * seg[0]
    nearest_c = start[1] + t * seg[1]
    return (rows - nearest_r) ** 2 + (cols - nearest_c) ** 2 <= (width / 2.0) ** 2


def _texture(cfg: SynthConfig, rng: np.random.Generator) -> NDArray[np.float64]:
    size = cfg.image_size
    if cfg.texture == "stripes":
        rows, cols = np.mgrid[:size, :size].astype(np.float64)
        angle = rng.uniform(-0.1, 0.1)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(
            2.0 * math.pi * (cols * math.cos(angle) + rows * math.sin(angle)) / cfg.stripe_period
            + phase
        )
        return 0.55 + 0.2 * wave
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), NOISE_TEXTURE_SIGMA)
    field = field / (np.abs(field).max() or 1.0)
    return 0.55 + 0.2 * field


def render_normal(cfg: SynthConfig, rng: np.random.Generator) -> ImageArray:
    """Textured square object on a plain background."""
    size = cfg.image_size
    img = np.full((size, size, 3), BACKGROUND_LEVEL)
    first, last = cfg.object_bounds
    texture = _texture(cfg, rng)
    tint = np.array([1.0, 0.9, 0.75])
    region = (slice(first, last + 1), slice(first, last + 1))
    img[region] = texture[region][..., None] * tint
    img += rng.normal(scale=PIXEL_NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def plant_defect(
    img: ImageArray, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[ImageArray, MaskArray]:
    """Add ``defect_delta`` inside a blob or scratch placed fully within the object."""
    first, last = cfg.object_bounds
    extent = cfg.defect_extent
    if extent > last - first + 1:
        raise ConfigError(
            f"Defect extent {extent}px does not fit the {last - first + 1}px object region."
        )
    shape = img.shape[:2]
    half = extent // 2
    low, high = first + half, last - (extent - 1 - half)
    center = (int(rng.integers(low, high + 1)), int(rng.integers(low, high + 1)))
    if cfg.defect == "blob":
        mask = disk_mask(shape, center, cfg.defect_radius)
    else:
        angle = rng.uniform(0.0, math.pi)
        dr = 0.5 * cfg.scratch_length * math.sin(angle)
        dc = 0.5 * cfg.scratch_length * math.cos(angle)
        mask = segment_mask(
            shape,
            (center[0] - dr, center[1] - dc),
            (center[0] + dr, center[1] + dc),
            cfg.scratch_width,
        )
    out = img.copy()
    out[mask] = np.clip(out[mask] + cfg.defect_delta, 0.0, 1.0)
    return out, mask


def generate_synthetic_category(cfg: SynthConfig, rng_seed: int, out_root: Path) -> DatasetIndex:
    """Write a complete ``train/test/ground_truth`` tree and return its index.

    Every image is drawn from a generator keyed by ``(rng_seed, split, i)``,
    so equal seeds produce bit-identical trees.
    """
    root = Path(out_root) / cfg.category
    first, last = cfg.object_bounds
    if cfg.n_test_anomalous and cfg.defect_extent > last - first + 1:
        raise ConfigError(
            f"Defect extent {cfg.defect_extent}px exceeds the object region ({last - first + 1}px)."
        )
    try:
        (root / "train" / "good").mkdir(parents=True, exist_ok=True)
        for i in range(cfg.n_train):
            img = render_normal(cfg, make_rng(rng_seed, "train", i))
            save_image(img, root / "train" / "good" / f"{i:03d}.png")
        for i in range(cfg.n_test_normal):
            img = render_normal(cfg, make_rng(rng_seed, "test-good", i))
            save_image(img, root / "test" / "good" / f"{i:03d}.png")
        (root / "test").mkdir(parents=True, exist_ok=True)
        for i in range(cfg.n_test_anomalous):
            rng = make_rng(rng_seed, "test-defect", i)
            img, mask = plant_defect(render_normal(cfg, rng), cfg, rng)
            save_image(img, root / "test" / cfg.defect / f"{i:03d}.png")
            save_mask(mask, root / "ground_truth" / cfg.defect / f"{i:03d}_mask.png")
    except OSError as exc:
        raise DatasetError(f"Cannot write synthetic category under {root}: {exc}") from exc
    LOGGER.info(
        "Synthetic category '%s' written to %s (%d train, %d normal test, %d anomalous test)",
        cfg.category,
        root,
        cfg.n_train,
        cfg.n_test_normal,
        cfg.n_test_anomalous,
    )
    return scan_dataset(root)
