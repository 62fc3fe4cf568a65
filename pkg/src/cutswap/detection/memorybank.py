"""Patch-feature memory bank: tile encoding, greedy coreset, nearest-neighbour scoring."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.spatial.distance import cdist
from tqdm import tqdm

from cutswap.dataset.imageio import resample_bilinear
from cutswap.model.checkpoint import encoder_digest
from cutswap.model.encoder import EncoderParams, encode_batch
from cutswap.models import ImageArray
from cutswap.services.exceptions import (
    ArtifactFormatError,
    ChecksumMismatchError,
    MissingArtifactError,
)
from cutswap.utils.seeding import make_rng

LOGGER = logging.getLogger(__name__)

DEFAULT_GRID = (8, 8)
DEFAULT_SMOOTH_SIGMA = 4.0
DEFAULT_MIN_BANK_SIZE = 256
DIGEST_SIZE = 32
MAGIC = b"CSB1"
_HEADER = struct.Struct("<IIIId")
_NO_CHECKSUM = bytes(DIGEST_SIZE)


@dataclass(frozen=True, eq=False)
class PatchFeature:
    """Encoded tile at ``(grid_row, grid_col)`` of image ``source``."""

    vector: NDArray[np.float64]
    grid_row: int
    grid_col: int
    source: str = ""


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """Coreset of normal patch features bound to one encoder by checksum."""

    features: NDArray[np.float32]
    coreset_ratio: float
    grid_dims: tuple[int, int]
    encoder_checksum: bytes = _NO_CHECKSUM
    selection_order: NDArray[np.intp] = field(default_factory=lambda: np.empty(0, np.intp))
    selection_distances: NDArray[np.float64] = field(default_factory=lambda: np.empty(0))

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("A memory bank needs at least one feature vector.")
        if not 0.0 < self.coreset_ratio <= 1.0:
            raise ValueError(f"coreset_ratio must be in (0, 1], got {self.coreset_ratio}.")
        if len(self.encoder_checksum) != DIGEST_SIZE:
            raise ValueError("encoder_checksum must be a 32-byte digest.")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def same_content(self, other: MemoryBank) -> bool:
        """Bitwise equality of everything a bank file stores."""
        return (
            self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and self.coreset_ratio == other.coreset_ratio
            and self.grid_dims == other.grid_dims
            and self.encoder_checksum == other.encoder_checksum
        )


@dataclass(frozen=True, eq=False)
class AnomalyResult:
    """Image score, smoothed heatmap and the per-tile scores they derive from."""

    image_score: float
    heatmap: NDArray[np.float64]
    patch_scores: NDArray[np.float64]


def tile_image(img: ImageArray, grid: tuple[int, int]) -> NDArray[np.float64]:
    """Split an image into ``rows * cols`` equal tiles, reflect-padding the far edges."""
    rows, cols = grid
    height, width = img.shape[:2]
    if rows < 1 or cols < 1:
        raise ValueError(f"Grid dimensions must be >= 1, got {grid}.")
    if rows > height or cols > width:
        raise ValueError(f"Grid {grid} is larger than the {height}x{width} image.")
    tile_h, tile_w = math.ceil(height / rows), math.ceil(width / cols)
    pad_h, pad_w = rows * tile_h - height, cols * tile_w - width
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    tiles = img.reshape(rows, tile_h, cols, tile_w, img.shape[2]).swapaxes(1, 2)
    return tiles.reshape(rows * cols, tile_h, tile_w, img.shape[2])


def extract_patch_features(
    enc: EncoderParams, img: ImageArray, grid: tuple[int, int], source: str = ""
) -> list[PatchFeature]:
    """Encode every tile of the grid independently, in row-major grid order."""
    rows, cols = grid
    vectors = encode_batch(enc, tile_image(img, grid))
    return [
        PatchFeature(vector=vectors[r * cols + c], grid_row=r, grid_col=c, source=source)
        for r in range(rows)
        for c in range(cols)
    ]


def coreset_size(ratio: float, count: int, min_size: int = 0) -> int:
    """``ceil(ratio * count)`` raised to ``min_size`` but never above ``count``."""
    # rounding first keeps e.g. 0.1 * 30 from ceiling to 4
    size = math.ceil(round(ratio * count, 9))
    return min(count, max(size, min_size, 1))


def greedy_coreset(
    candidates: NDArray[np.floating] | Sequence[NDArray[np.floating]],
    ratio: float,
    seed: int,
    *,
    grid_dims: tuple[int, int] = DEFAULT_GRID,
    encoder_checksum: bytes = _NO_CHECKSUM,
    min_size: int = 0,
    quiet: bool = True,
) -> MemoryBank:
    """Farthest-point subsample of ``candidates``.

    The first element is drawn from ``seed``; every further element is the
    candidate farthest from the current selection (lowest index on ties).
    Selection stops at ``ceil(ratio * n)`` elements, lifted to ``min_size``.
    Distances are computed on the float32 values the bank stores.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}.")
    stored = np.asarray(candidates, dtype=np.float32)
    if stored.ndim == 1:
        stored = stored[:, None]
    count = stored.shape[0] if stored.ndim == 2 else 0
    if count == 0:
        raise ValueError("greedy_coreset needs at least one candidate.")
    points = stored.astype(np.float64)
    size = coreset_size(ratio, count, min_size)

    order = np.empty(size, dtype=np.intp)
    distances = np.empty(size, dtype=np.float64)
    order[0] = int(make_rng(seed, "coreset").integers(count))
    distances[0] = np.inf
    mins = cdist(points[order[0] : order[0] + 1], points)[0]
    mins[order[0]] = -1.0
    for step in tqdm(range(1, size), desc="Greedy coreset", disable=True if quiet else None):
        chosen = int(np.argmax(mins))
        order[step] = chosen
        distances[step] = mins[chosen]
        mins = np.minimum(mins, cdist(points[chosen : chosen + 1], points)[0])
        mins[order[: step + 1]] = -1.0
    LOGGER.debug("Coreset kept %d of %d candidates (ratio %g)", size, count, ratio)
    return MemoryBank(
        features=stored[order],
        coreset_ratio=float(ratio),
        grid_dims=grid_dims,
        encoder_checksum=encoder_checksum,
        selection_order=order,
        selection_distances=distances,
    )


def build_bank(
    enc: EncoderParams,
    images: Sequence[ImageArray],
    grid: tuple[int, int],
    ratio: float,
    seed: int,
    *,
    min_size: int = DEFAULT_MIN_BANK_SIZE,
    quiet: bool = True,
) -> MemoryBank:
    """Encode every tile of every image and keep a greedy coreset of the features."""
    if not images:
        raise ValueError("build_bank needs at least one image.")
    candidates = np.concatenate([encode_batch(enc, tile_image(img, grid)) for img in images])
    return greedy_coreset(
        candidates,
        ratio,
        seed,
        grid_dims=grid,
        encoder_checksum=encoder_digest(enc),
        min_size=min_size,
        quiet=quiet,
    )


def nearest_distances(bank: MemoryBank, queries: NDArray[np.floating]) -> NDArray[np.float64]:
    """Euclidean distance of every query to its nearest bank vector (exhaustive)."""
    rounded = np.atleast_2d(np.asarray(queries, dtype=np.float32)).astype(np.float64)
    if rounded.shape[1] != bank.feature_dim:
        raise ValueError(f"Queries have {rounded.shape[1]} dims, the bank {bank.feature_dim}.")
    return cdist(rounded, bank.features.astype(np.float64)).min(axis=1)


def score_image(
    bank: MemoryBank,
    patches: Sequence[PatchFeature],
    out_dims: tuple[int, int],
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
) -> AnomalyResult:
    """Nearest-neighbour score per tile, max as image score, smoothed upsampled heatmap."""
    if len(bank) == 0:
        raise ValueError("Cannot score against an empty bank.")
    rows, cols = bank.grid_dims
    if len(patches) != rows * cols:
        raise ValueError(
            f"Expected {rows * cols} patches for grid {bank.grid_dims}, got {len(patches)}."
        )
    grid = np.full((rows, cols), np.nan)
    vectors = np.stack([patch.vector for patch in patches])
    scores = nearest_distances(bank, vectors)
    for patch, score in zip(patches, scores):
        if not (0 <= patch.grid_row < rows and 0 <= patch.grid_col < cols):
            raise ValueError(
                f"Patch ({patch.grid_row}, {patch.grid_col}) lies outside grid {bank.grid_dims}."
            )
        grid[patch.grid_row, patch.grid_col] = score
    if np.isnan(grid).any():
        raise ValueError("Patches do not cover every cell of the bank grid.")
    heatmap = resample_bilinear(grid, out_dims[0], out_dims[1])
    if smooth_sigma > 0:
        heatmap = ndimage.gaussian_filter(heatmap, smooth_sigma, mode="nearest")
    return AnomalyResult(
        image_score=float(grid.max()),
        heatmap=np.maximum(heatmap, 0.0),
        patch_scores=grid,
    )


def dumps_bank(bank: MemoryBank) -> bytes:
    rows, cols = bank.grid_dims
    header = MAGIC + _HEADER.pack(bank.feature_dim, len(bank), rows, cols, bank.coreset_ratio)
    return header + bank.features.astype("<f4").tobytes() + bank.encoder_checksum


def loads_bank(data: bytes) -> MemoryBank:
    """Parse bank bytes; any size disagreement is reported, never tolerated."""
    prefix = len(MAGIC) + _HEADER.size
    if len(data) < prefix or data[: len(MAGIC)] != MAGIC:
        raise ArtifactFormatError("Not a CSB1 memory bank (bad magic or short header).")
    dim, count, rows, cols, ratio = _HEADER.unpack_from(data, len(MAGIC))
    expected = prefix + 4 * dim * count + DIGEST_SIZE
    if len(data) != expected:
        raise ArtifactFormatError(f"Bank file holds {len(data)} bytes, expected {expected}.")
    if dim == 0 or count == 0 or rows == 0 or cols == 0:
        raise ArtifactFormatError("Bank header describes an empty bank.")
    features = np.frombuffer(data, dtype="<f4", count=dim * count, offset=prefix)
    try:
        return MemoryBank(
            features=features.astype(np.float32).reshape(count, dim),
            coreset_ratio=ratio,
            grid_dims=(rows, cols),
            encoder_checksum=bytes(data[-DIGEST_SIZE:]),
        )
    except ValueError as exc:
        raise ArtifactFormatError(f"Invalid bank content: {exc}") from exc


def save_bank(bank: MemoryBank, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_bank(bank))
    LOGGER.info("Memory bank (%d x %d) written to %s", len(bank), bank.feature_dim, path)


def load_bank(path: Path, expected_checksum: bytes | None = None) -> MemoryBank:
    """Read a bank, optionally verifying the digest of the encoder that built it."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Memory bank not found: {path}")
    bank = loads_bank(path.read_bytes())
    if expected_checksum is not None and bank.encoder_checksum != expected_checksum:
        raise ChecksumMismatchError(
            f"Memory bank {path} was built by a different encoder checkpoint."
        )
    return bank
