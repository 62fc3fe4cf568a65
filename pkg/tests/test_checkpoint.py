import numpy as np
import pytest

from cutswap.model.checkpoint import (
    MAGIC,
    dumps_checkpoint,
    encoder_digest,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
)
from cutswap.model.encoder import init_encoder, init_head
from cutswap.services.exceptions import ArtifactFormatError, MissingArtifactError


def _pair(seed=0):
    return init_encoder(seed, (4, 8), 6), init_head(seed, 6, 3, hidden=5)


def test_checkpoint_round_trip_keeps_f32_values(tmp_path) -> None:
    encoder, head = _pair()
    path = tmp_path / "model" / "encoder.csw"

    save_checkpoint(path, encoder, head)
    loaded_encoder, loaded_head = load_checkpoint(path)

    assert path.read_bytes().startswith(MAGIC)
    for original, loaded in zip(
        (*encoder.tensors(), *head.tensors()), (*loaded_encoder.tensors(), *loaded_head.tensors())
    ):
        assert loaded.dtype == np.float64
        assert np.array_equal(loaded, original.astype(np.float32).astype(np.float64))
    assert loaded_encoder.channels == (4, 8)
    assert loaded_head.num_classes == 3


def test_reserialized_checkpoint_is_byte_identical() -> None:
    data = dumps_checkpoint(*_pair(1))

    assert dumps_checkpoint(*loads_checkpoint(data)) == data


def test_bad_magic_is_rejected() -> None:
    data = dumps_checkpoint(*_pair())

    with pytest.raises(ArtifactFormatError):
        loads_checkpoint(b"XXXX" + data[4:])


@pytest.mark.parametrize("keep", [6, 12, -1, -10])
def test_truncated_checkpoint_is_rejected(keep) -> None:
    data = dumps_checkpoint(*_pair())

    with pytest.raises(ArtifactFormatError):
        loads_checkpoint(data[:keep])


def test_trailing_bytes_are_rejected() -> None:
    with pytest.raises(ArtifactFormatError):
        loads_checkpoint(dumps_checkpoint(*_pair()) + b"\x00\x00\x00\x00")


def test_non_finite_parameters_are_rejected() -> None:
    encoder, head = _pair()
    tensors = encoder.tensors()
    tensors[1] = np.full_like(tensors[1], np.nan)

    with pytest.raises(ArtifactFormatError):
        loads_checkpoint(dumps_checkpoint(encoder.with_tensors(tensors), head))


def test_missing_checkpoint_file(tmp_path) -> None:
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "absent.csw")


def test_corrupt_file_names_its_path(tmp_path) -> None:
    path = tmp_path / "broken.csw"
    path.write_bytes(b"CSW1")

    with pytest.raises(ArtifactFormatError, match="broken.csw"):
        load_checkpoint(path)


def test_digest_tracks_encoder_parameters() -> None:
    encoder, _ = _pair()
    tensors = encoder.tensors()
    tensors[-1] = tensors[-1] + 1.0

    assert encoder_digest(encoder) == encoder_digest(encoder.copy())
    assert encoder_digest(encoder) != encoder_digest(encoder.with_tensors(tensors))
    assert len(encoder_digest(encoder)) == 32
