"""Versioned binary checkpoints for encoder and head parameters.

Layout (little-endian): magic ``CSW1``, a u32 count ``n`` followed by ``n``
u32 dimension words, then every tensor as f32 in declaration order
(encoder convolutions, projection, head layers).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from pathlib import Path

import numpy as np

from cutswap.model.encoder import KERNEL, EncoderParams, HeadParams
from cutswap.services.exceptions import ArtifactFormatError, MissingArtifactError

LOGGER = logging.getLogger(__name__)

MAGIC = b"CSW1"
_U32 = "<u4"
_F32 = "<f4"


def _dims_header(encoder: EncoderParams, head: HeadParams) -> list[int]:
    return [
        encoder.in_channels,
        len(encoder.channels),
        *encoder.channels,
        encoder.feature_dim,
        len(head.weights),
        *(int(w.shape[0]) for w in head.weights),
    ]


def _shapes(dims: list[int]) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Rebuild encoder and head tensor shapes from the dimension words."""
    cursor = 0

    def take(count: int = 1) -> list[int]:
        nonlocal cursor
        if cursor + count > len(dims):
            raise ArtifactFormatError("Checkpoint header is shorter than its layout requires.")
        values = dims[cursor : cursor + count]
        cursor += count
        return values

    in_channels, conv_count = take(2)
    channels = take(conv_count)
    (feature_dim,) = take()
    (layer_count,) = take()
    head_dims = take(layer_count)
    if cursor != len(dims):
        raise ArtifactFormatError("Checkpoint header has trailing dimension words.")
    if conv_count < 1 or layer_count < 1 or min(channels + head_dims + [feature_dim]) < 1:
        raise ArtifactFormatError(f"Checkpoint header describes an empty layer: {dims}.")

    encoder_shapes: list[tuple[int, ...]] = []
    previous = in_channels
    for out_channels in channels:
        encoder_shapes.extend([(out_channels, previous, KERNEL, KERNEL), (out_channels,)])
        previous = out_channels
    encoder_shapes.extend([(feature_dim, previous), (feature_dim,)])

    head_shapes: list[tuple[int, ...]] = []
    previous = feature_dim
    for out_dim in head_dims:
        head_shapes.extend([(out_dim, previous), (out_dim,)])
        previous = out_dim
    return encoder_shapes, head_shapes


def encoder_bytes(encoder: EncoderParams) -> bytes:
    """Serialized encoder tensors (f32, declaration order)."""
    return b"".join(np.asarray(t, dtype=_F32).tobytes() for t in encoder.tensors())


def encoder_digest(encoder: EncoderParams) -> bytes:
    """SHA-256 binding artifacts to the encoder that produced them."""
    return hashlib.sha256(encoder_bytes(encoder)).digest()


def dumps_checkpoint(encoder: EncoderParams, head: HeadParams) -> bytes:
    dims = _dims_header(encoder, head)
    header = MAGIC + struct.pack("<I", len(dims)) + np.asarray(dims, dtype=_U32).tobytes()
    tensors = (*encoder.tensors(), *head.tensors())
    body = b"".join(np.asarray(t, dtype=_F32).tobytes() for t in tensors)
    return header + body


def loads_checkpoint(data: bytes) -> tuple[EncoderParams, HeadParams]:
    """Parse checkpoint bytes, rejecting bad magic, truncation and trailing data."""
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise ArtifactFormatError("Not a CSW1 checkpoint (bad magic).")
    offset = len(MAGIC)
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) < offset + 4 * count:
        raise ArtifactFormatError("Checkpoint truncated inside the dimension header.")
    dims = [int(v) for v in np.frombuffer(data, dtype=_U32, count=count, offset=offset)]
    offset += 4 * count
    encoder_shapes, head_shapes = _shapes(dims)
    expected = sum(int(np.prod(shape)) for shape in encoder_shapes + head_shapes) * 4
    if len(data) - offset != expected:
        raise ArtifactFormatError(
            f"Checkpoint body holds {len(data) - offset} bytes, expected {expected}."
        )
    tensors = []
    for shape in encoder_shapes + head_shapes:
        size = int(np.prod(shape))
        values = np.frombuffer(data, dtype=_F32, count=size, offset=offset)
        tensors.append(values.astype(np.float64).reshape(shape))
        offset += 4 * size
    if not all(np.all(np.isfinite(t)) for t in tensors):
        raise ArtifactFormatError("Checkpoint contains non-finite parameters.")
    conv_count = (len(encoder_shapes) - 2) // 2
    encoder = EncoderParams(
        conv_weights=tuple(tensors[0 : 2 * conv_count : 2]),
        conv_biases=tuple(tensors[1 : 2 * conv_count : 2]),
        proj_weight=tensors[2 * conv_count],
        proj_bias=tensors[2 * conv_count + 1],
    )
    head_tensors = tensors[len(encoder_shapes) :]
    head = HeadParams(weights=tuple(head_tensors[0::2]), biases=tuple(head_tensors[1::2]))
    return encoder, head


def save_checkpoint(path: Path, encoder: EncoderParams, head: HeadParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(encoder, head))
    LOGGER.info("Checkpoint written to %s", path)


def load_checkpoint(path: Path) -> tuple[EncoderParams, HeadParams]:
    """Read a checkpoint; parameters come back as float64 copies of the stored f32 values."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Checkpoint not found: {path}")
    try:
        return loads_checkpoint(path.read_bytes())
    except ArtifactFormatError as exc:
        raise ArtifactFormatError(f"{path}: {exc}") from exc
