"""Raster I/O and the weak augmentations applied to normal samples."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image, UnidentifiedImageError

from cutswap.models import ImageArray, MaskArray
from cutswap.services.exceptions import ImageFormatError
from cutswap.utils.seeding import make_rng

LOGGER = logging.getLogger(__name__)

MIN_WORKING_SIZE = 8
MAX_INTENSITY = 255.0
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Modes that decode losslessly into 8-bit RGB; 16-bit, float and alpha modes are rejected.
_RGB_MODES = {"RGB", "P"}
_GRAY_MODES = {"L", "1"}


def check_image(img: ImageArray, *, min_size: int = 1) -> None:
    """Validate the shape, finiteness and range invariants of an image."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"Expected an H x W x 3 image, got shape {img.shape}.")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise ValueError(f"Image must be at least {min_size}x{min_size}, got {img.shape[:2]}.")
    if not np.all(np.isfinite(img)):
        raise ValueError("Image contains non-finite values.")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("Image values must lie in [0, 1].")


def _open_raster(path: Path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Image file not found: {path}")
    try:
        with Image.open(path) as raster:
            raster.load()
            return raster.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"Cannot decode raster {path}: {exc}") from exc


def load_image(path: Path) -> ImageArray:
    """Decode an 8-bit raster into an RGB float image scaled to [0, 1]."""
    raster = _open_raster(path)
    if raster.mode in _GRAY_MODES:
        raster = raster.convert("L").convert("RGB")
    elif raster.mode in _RGB_MODES:
        raster = raster.convert("RGB")
    else:
        raise ImageFormatError(
            f"Unsupported raster mode '{raster.mode}' in {path}; expected 8-bit gray or RGB."
        )
    return np.asarray(raster, dtype=np.float64) / MAX_INTENSITY


def load_gray(path: Path) -> NDArray[np.float64]:
    """Decode an 8-bit single-channel raster into a float map in [0, 1]."""
    raster = _open_raster(path)
    if raster.mode not in _GRAY_MODES | _RGB_MODES:
        raise ImageFormatError(f"Unsupported raster mode '{raster.mode}' in {path}.")
    return np.asarray(raster.convert("L"), dtype=np.float64) / MAX_INTENSITY


def load_mask(path: Path) -> MaskArray:
    """Decode a binary mask raster (0 or 255) into a boolean array."""
    return load_gray(path) >= 0.5


def _to_uint8(values: NDArray[np.float64]) -> NDArray[np.uint8]:
    return np.rint(np.clip(values, 0.0, 1.0) * MAX_INTENSITY).astype(np.uint8)


def save_image(img: ImageArray, path: Path) -> None:
    """Write an image as a lossless 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(img)).save(path, format="PNG")


def save_gray(values: NDArray[np.float64], path: Path) -> None:
    """Write a [0, 1] map as an 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(values)).save(path, format="PNG")


def save_mask(mask: MaskArray, path: Path) -> None:
    """Write a boolean mask as 0/255 grayscale PNG."""
    save_gray(mask.astype(np.float64), path)


def _sample_axis(
    in_size: int, out_size: int
) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.float64]]:
    """Half-pixel-centered source coordinates for one axis."""
    coords = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    coords = np.clip(coords, 0.0, in_size - 1)
    lower = np.floor(coords).astype(np.intp)
    upper = np.minimum(lower + 1, in_size - 1)
    return lower, upper, coords - lower


def resample_bilinear(values: NDArray[np.float64], out_h: int, out_w: int) -> NDArray[np.float64]:
    """Bilinearly resample a 2-D or 3-D array along its first two axes.

    Interpolation is written as ``a + (b - a) * t`` so constant inputs are
    reproduced exactly and same-size resampling is the identity.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Target dimensions must be >= 1, got ({out_h}, {out_w}).")
    in_h, in_w = values.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return values.astype(np.float64, copy=True)
    top, bottom, wy = _sample_axis(in_h, out_h)
    left, right, wx = _sample_axis(in_w, out_w)
    extra = (1,) * (values.ndim - 2)
    wy = wy.reshape((-1, 1) + extra)
    wx = wx.reshape((1, -1) + extra)
    rows_top = values[top]
    rows_bottom = values[bottom]
    upper_row = rows_top[:, left] + (rows_top[:, right] - rows_top[:, left]) * wx
    lower_row = rows_bottom[:, left] + (rows_bottom[:, right] - rows_bottom[:, left]) * wx
    return upper_row + (lower_row - upper_row) * wy


def resize_bilinear(img: ImageArray, out_h: int, out_w: int) -> ImageArray:
    """Resize an image with half-pixel-centered bilinear interpolation."""
    return np.clip(resample_bilinear(img, out_h, out_w), 0.0, 1.0)


def grayscale(img: ImageArray) -> NDArray[np.float64]:
    """Luma-weighted gray level per pixel."""
    return img @ GRAY_WEIGHTS


def color_jitter(img: ImageArray, rng_seed: int, strength: float) -> ImageArray:
    """Apply brightness, contrast and saturation jitter in that fixed order.

    Every channel draws its own factors uniformly from
    ``[1 - strength, 1 + strength]``: brightness multiplies the channel,
    contrast scales it about its mean and saturation scales it about the
    per-pixel gray level. The result is clamped to [0, 1].
    """
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}.")
    if strength == 0:
        return img.copy()
    rng = make_rng(rng_seed, "jitter")
    brightness, contrast, saturation = rng.uniform(
        1.0 - strength, 1.0 + strength, size=(3, img.shape[-1])
    )
    out = img * brightness
    mean = out.mean(axis=(0, 1))
    out = mean + (out - mean) * contrast
    gray = grayscale(out)[..., None]
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0)


def prepare_image(path: Path, size: int) -> ImageArray:
    """Load a raster and bring it to the square working resolution."""
    img = load_image(path)
    resized = resize_bilinear(img, size, size)
    check_image(resized, min_size=MIN_WORKING_SIZE)
    return resized
