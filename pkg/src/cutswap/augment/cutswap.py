"""Saliency-guided patch swapping: anchor sampling, swaps, scars and the per-image driver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from cutswap.augment.cluster import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    PixelSet,
    fit_map,
    max_saliency_cluster,
    min_saliency_cluster,
    random_saliency_cluster,
    top_saliency_pixels,
    whole_image_pixels,
)
from cutswap.augment.saliency import require_usable
from cutswap.dataset.imageio import color_jitter
from cutswap.models import Coord, ImageArray, SaliencyMap, SaliencyStack
from cutswap.services.exceptions import ConfigError, DegenerateMapError, LevelSkipError
from cutswap.utils.seeding import derive_seed, make_rng

LOGGER = logging.getLogger(__name__)

NORMAL_CLASS = 0
CUTSWAP_CLASS = 1
SCAR_CLASS = 2
LABEL_NAMES = {NORMAL_CLASS: "normal", CUTSWAP_CLASS: "cutswap", SCAR_CLASS: "scar"}

ANCHOR_STRATEGIES = (
    "kmeans-max",
    "kmeans-min",
    "kmeans-random",
    "saliency-sort-topM",
    "whole-image",
)

RngLike = int | np.random.Generator


@dataclass(frozen=True)
class AugmentConfig:  # pylint: disable=too-many-instance-attributes
    """Patch geometry, anchor strategy and weak-augmentation settings."""

    k: int = 4
    anchor_strategy: str = "kmeans-max"
    top_m: int = 300
    area_ratio_range: tuple[float, float] = (0.02, 0.15)
    aspect_ratio_range: tuple[float, float] = (0.3, 3.3)
    scar_width_range: tuple[int, int] = (2, 4)
    scar_length_range: tuple[int, int] = (10, 25)
    scar_rotation_range: tuple[float, float] = (-45.0, 45.0)
    max_anchor_attempts: int = 50
    allow_overlap: bool = False
    jitter_strength: float = 0.1
    scar_per_level: bool = False
    kmeans_max_iters: int = DEFAULT_MAX_ITERS
    kmeans_tol: float = DEFAULT_TOL
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"augment.k must be >= 1, got {self.k}")
        if self.anchor_strategy not in ANCHOR_STRATEGIES:
            raise ConfigError(
                f"augment.anchor_strategy must be one of {ANCHOR_STRATEGIES}, "
                f"got {self.anchor_strategy!r}"
            )
        if self.top_m < 2:
            raise ConfigError(f"augment.top_m must be >= 2, got {self.top_m}")
        for name in ("area_ratio_range", "aspect_ratio_range", "scar_width_range",
                     "scar_length_range"):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise ConfigError(f"augment.{name} must satisfy 0 < low <= high, got {low, high}")
        if self.scar_width_range[1] >= self.scar_length_range[0]:
            raise ConfigError(
                "augment.scar_width_range must stay below scar_length_range, got "
                f"{self.scar_width_range} and {self.scar_length_range}"
            )
        if self.area_ratio_range[1] > 1.0:
            raise ConfigError("augment.area_ratio_range cannot exceed the image area")
        low, high = self.scar_rotation_range
        if low > high:
            raise ConfigError(f"augment.scar_rotation_range must be ordered, got {low, high}")
        if self.max_anchor_attempts < 1:
            raise ConfigError("augment.max_anchor_attempts must be >= 1")
        if self.jitter_strength < 0:
            raise ConfigError("augment.jitter_strength must be >= 0")
        if self.kmeans_max_iters < 1 or self.kmeans_tol <= 0:
            raise ConfigError("augment.kmeans_max_iters must be >= 1 and kmeans_tol > 0")


@dataclass(frozen=True)
class PatchSpec:
    """Axis-aligned patch footprint with an optional content rotation."""

    top: int
    left: int
    height: int
    width: int
    rotation_deg: float = 0.0

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))

    def check_bounds(self, img_dims: tuple[int, int]) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"Patch dimensions must be >= 1, got {self.height}x{self.width}.")
        if (
            self.top < 0
            or self.left < 0
            or self.top + self.height > img_dims[0]
            or self.left + self.width > img_dims[1]
        ):
            raise ValueError(f"Patch {self} exceeds image bounds {img_dims}.")


@dataclass(frozen=True)
class AnchorPair:
    """Upper-left corners of the two patches."""

    a1: Coord
    a2: Coord
    source_level: int


@dataclass(frozen=True, eq=False)
class SamplePair:
    """A positive image with one negative derived from it."""

    positive: ImageArray
    negative: ImageArray
    level: int
    label: int
    anchors: AnchorPair
    patches: tuple[PatchSpec, PatchSpec]
    seed: int


@dataclass(frozen=True, eq=False)
class LevelSweep:
    """Shared positive, the pairs of every usable level and one warning per skipped level."""

    positive: ImageArray
    pairs: tuple[SamplePair, ...]
    warnings: tuple[str, ...] = ()


def _rng(rng_seed: RngLike) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_anchor_pair(
    pixels: PixelSet,
    patch: tuple[int, int],
    img_dims: tuple[int, int],
    rng_seed: RngLike,
    cfg: AugmentConfig,
    *,
    source_level: int = 0,
) -> AnchorPair:
    """Draw two distinct anchors whose induced patches lie inside the image.

    Anchors are upper-left patch corners; out-of-bounds anchors are rejected,
    never clamped. Without ``allow_overlap`` the draw is repeated up to
    ``max_anchor_attempts`` times until the two footprints are disjoint.
    """
    height, width = patch
    if height < 1 or width < 1 or height > img_dims[0] or width > img_dims[1]:
        raise LevelSkipError(f"Patch {height}x{width} does not fit image {img_dims}.")
    coords = pixels.coords
    valid = coords[(coords[:, 0] <= img_dims[0] - height) & (coords[:, 1] <= img_dims[1] - width)]
    if valid.shape[0] < 2:
        raise LevelSkipError(
            f"Only {valid.shape[0]} in-bounds anchor(s) for a {height}x{width} patch."
        )
    rng = _rng(rng_seed)
    for _ in range(cfg.max_anchor_attempts):
        first, second = rng.choice(valid.shape[0], size=2, replace=False)
        a1 = (int(valid[first, 0]), int(valid[first, 1]))
        a2 = (int(valid[second, 0]), int(valid[second, 1]))
        disjoint = abs(a1[0] - a2[0]) >= height or abs(a1[1] - a2[1]) >= width
        if cfg.allow_overlap or disjoint:
            return AnchorPair(a1=a1, a2=a2, source_level=source_level)
    raise LevelSkipError(
        f"No disjoint {height}x{width} patch pair found in {cfg.max_anchor_attempts} attempts."
    )


def swap_patches(img: ImageArray, p1: PatchSpec, p2: PatchSpec) -> ImageArray:
    """Exchange the contents of two equally sized footprints.

    Pixels outside both footprints are copied bit for bit; for disjoint
    footprints the operation is an involution.
    """
    if (p1.height, p1.width) != (p2.height, p2.width):
        raise ValueError(
            f"Patch sizes differ: {p1.height}x{p1.width} vs {p2.height}x{p2.width}."
        )
    dims = (int(img.shape[0]), int(img.shape[1]))
    p1.check_bounds(dims)
    p2.check_bounds(dims)
    out = img.copy()
    first = img[p1.slices].copy()
    second = img[p2.slices].copy()
    out[p1.slices] = second
    out[p2.slices] = first
    return out


def rotate_within(content: ImageArray, fallback: ImageArray, angle_deg: float) -> ImageArray:
    """Rotate patch content about its center with nearest-neighbour sampling.

    Destination pixels whose source falls outside the patch keep ``fallback``.
    """
    if angle_deg == 0.0:
        return content.copy()
    height, width = content.shape[:2]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rows, cols = np.indices((height, width), dtype=np.float64)
    dy, dx = rows - cy, cols - cx
    src_r = np.rint(cy + cos_t * dy + sin_t * dx).astype(np.intp)
    src_c = np.rint(cx - sin_t * dy + cos_t * dx).astype(np.intp)
    inside = (src_r >= 0) & (src_r < height) & (src_c >= 0) & (src_c < width)
    out = fallback.copy()
    out[inside] = content[src_r[inside], src_c[inside]]
    return out


def guided_pixels(
    saliency_map: SaliencyMap, k: int, rng: np.random.Generator, cfg: AugmentConfig
) -> PixelSet:
    """Anchor candidates for one level under the configured strategy."""
    strategy = cfg.anchor_strategy
    if strategy == "whole-image":
        return whole_image_pixels(saliency_map)
    require_usable(saliency_map)
    if strategy == "saliency-sort-topM":
        return top_saliency_pixels(saliency_map, min(cfg.top_m, saliency_map.data.size))
    model = fit_map(saliency_map, k, cfg.kmeans_max_iters, cfg.kmeans_tol)
    if strategy == "kmeans-min":
        return min_saliency_cluster(model, saliency_map)
    if strategy == "kmeans-random":
        return random_saliency_cluster(model, saliency_map, rng)
    return max_saliency_cluster(model, saliency_map)


def draw_patch_dims(
    rng: np.random.Generator, img_dims: tuple[int, int], cfg: AugmentConfig
) -> tuple[int, int]:
    """Patch height and width from the area-ratio and log-uniform aspect ranges."""
    height, width = img_dims
    area = rng.uniform(*cfg.area_ratio_range) * height * width
    log_low, log_high = (math.log(bound) for bound in cfg.aspect_ratio_range)
    aspect = math.exp(rng.uniform(log_low, log_high))
    patch_w = int(round(math.sqrt(area * aspect)))
    patch_h = int(round(math.sqrt(area / aspect)))
    return min(max(patch_h, 1), height - 1), min(max(patch_w, 1), width - 1)


def draw_scar_dims(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[int, int]:
    """Long-thin scar footprint: height from the width range, width from the length range."""
    thickness = int(rng.integers(cfg.scar_width_range[0], cfg.scar_width_range[1] + 1))
    length = int(rng.integers(cfg.scar_length_range[0], cfg.scar_length_range[1] + 1))
    return thickness, length


def _guided_swap(
    pos: ImageArray,
    saliency_map: SaliencyMap,
    k: int,
    rng_seed: int,
    cfg: AugmentConfig,
    *,
    scar: bool,
) -> SamplePair:
    rng = np.random.default_rng(rng_seed)
    dims = (int(pos.shape[0]), int(pos.shape[1]))
    if saliency_map.shape != dims:
        raise ValueError(f"Saliency map {saliency_map.shape} does not match image {dims}.")
    try:
        pixels = guided_pixels(saliency_map, k, rng, cfg)
    except DegenerateMapError as exc:
        raise LevelSkipError(str(exc)) from exc
    if scar:
        patch = draw_scar_dims(rng, cfg)
        low, high = cfg.scar_rotation_range
        angle = float(rng.uniform(low, high)) if high > low else float(low)
    else:
        patch = draw_patch_dims(rng, dims, cfg)
        angle = 0.0
    anchors = sample_anchor_pair(
        pixels, patch, dims, rng, cfg, source_level=saliency_map.level_index
    )
    p1 = PatchSpec(anchors.a1[0], anchors.a1[1], patch[0], patch[1], rotation_deg=angle)
    p2 = PatchSpec(anchors.a2[0], anchors.a2[1], patch[0], patch[1], rotation_deg=angle)
    negative = swap_patches(pos, p1, p2)
    if scar and angle != 0.0:
        negative[p1.slices] = rotate_within(pos[p2.slices], pos[p1.slices], angle)
        negative[p2.slices] = rotate_within(pos[p1.slices], pos[p2.slices], angle)
    return SamplePair(
        positive=pos,
        negative=negative,
        level=saliency_map.level_index,
        label=SCAR_CLASS if scar else CUTSWAP_CLASS,
        anchors=anchors,
        patches=(p1, p2),
        seed=rng_seed,
    )


def cutswap_level(
    pos: ImageArray, saliency_map: SaliencyMap, k: int, rng_seed: int, cfg: AugmentConfig
) -> SamplePair:
    """One CutSwap negative guided by one saliency level.

    Raises :class:`LevelSkipError` for degenerate maps or infeasible anchors;
    the positive sample is never modified.
    """
    return _guided_swap(pos, saliency_map, k, rng_seed, cfg, scar=False)


def scar_swap(
    pos: ImageArray, saliency_map: SaliencyMap, k: int, rng_seed: int, cfg: AugmentConfig
) -> SamplePair:
    """Scar negative: long-thin patches swapped, then each rotated in place."""
    return _guided_swap(pos, saliency_map, k, rng_seed, cfg, scar=True)


def _scar_levels(stack: SaliencyStack, rng_seed: int, cfg: AugmentConfig) -> list[SaliencyMap]:
    if cfg.scar_per_level:
        return list(stack.maps)
    usable = [m for m in stack.maps if not m.degenerate] or list(stack.maps)
    choice = int(make_rng(rng_seed, "scar-level").integers(len(usable)))
    return [usable[choice]]


def weak_augment(normal: ImageArray, rng_seed: int, cfg: AugmentConfig) -> ImageArray:
    """Positive sample: the normal image under seeded color jitter."""
    return color_jitter(normal, derive_seed(rng_seed, "positive"), cfg.jitter_strength)


def cutswap_all_levels(
    normal: ImageArray,
    stack: SaliencyStack,
    k: int,
    rng_seed: int,
    cfg: AugmentConfig,
    *,
    include_scar: bool = False,
) -> LevelSweep:
    """Weak-augment ``normal`` once and derive one negative per usable level.

    Every level draws from its own seed derived from ``(rng_seed, level)``.
    Skipped levels are logged at WARNING and returned as ``warnings``; when
    every level is skipped the sweep holds no pairs. With ``include_scar``
    scar negatives follow the CutSwap ones.
    """
    positive = weak_augment(normal, rng_seed, cfg)
    pairs: list[SamplePair] = []
    skipped: list[str] = []
    for saliency_map in stack.maps:
        level_seed = derive_seed(rng_seed, "level", saliency_map.level_index)
        try:
            pairs.append(cutswap_level(positive, saliency_map, k, level_seed, cfg))
        except LevelSkipError as exc:
            skipped.append(f"Skipped level {saliency_map.level_index}: {exc}")
    if include_scar:
        for saliency_map in _scar_levels(stack, rng_seed, cfg):
            scar_seed = derive_seed(rng_seed, "scar", saliency_map.level_index)
            try:
                pairs.append(scar_swap(positive, saliency_map, k, scar_seed, cfg))
            except LevelSkipError as exc:
                skipped.append(f"Skipped scar level {saliency_map.level_index}: {exc}")
    for reason in skipped:
        LOGGER.warning("%s (seed %d)", reason, rng_seed)
    if not pairs:
        LOGGER.warning("Every saliency level was skipped (seed %d)", rng_seed)
    return LevelSweep(positive=positive, pairs=tuple(pairs), warnings=tuple(skipped))
