import itertools

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from cutswap.detection.memorybank import (
    DEFAULT_MIN_BANK_SIZE,
    MemoryBank,
    PatchFeature,
    build_bank,
    coreset_size,
    extract_patch_features,
    greedy_coreset,
    load_bank,
    nearest_distances,
    save_bank,
    score_image,
    tile_image,
)
from cutswap.model.checkpoint import encoder_digest
from cutswap.model.encoder import encode, init_encoder
from cutswap.services.exceptions import (
    ArtifactFormatError,
    ChecksumMismatchError,
    MissingArtifactError,
)
from cutswap.utils.seeding import make_rng

ENCODER = init_encoder(0, (4, 4), 6)


def _images(count, size=16, seed=0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=(size, size, 3)) for _ in range(count)]


def _f32_points(count, dim=3, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(count, dim)).astype(np.float32)


def _bank(vectors, grid=(1, 1)) -> MemoryBank:
    return MemoryBank(np.asarray(vectors, dtype=np.float32), 1.0, grid)


def test_single_tile_grid_encodes_the_whole_image() -> None:
    img = _images(1)[0]

    patches = extract_patch_features(ENCODER, img, (1, 1))

    assert len(patches) == 1
    assert np.array_equal(patches[0].vector, encode(ENCODER, img))


def test_grid_tiles_cover_the_image_in_row_major_order() -> None:
    img = np.random.default_rng(1).uniform(size=(128, 128, 3))

    tiles = tile_image(img, (4, 4))

    assert tiles.shape == (16, 32, 32, 3)
    assert np.array_equal(tiles[6], img[32:64, 64:96])


def test_uneven_tiles_are_reflect_padded() -> None:
    img = np.random.default_rng(2).uniform(size=(30, 30, 3))

    tiles = tile_image(img, (4, 4))

    assert tiles.shape == (16, 8, 8, 3)
    assert np.array_equal(tiles[12][6], img[28, 0:8])
    assert np.array_equal(tiles[12][7], img[27, 0:8])


def test_patch_features_only_see_their_own_tile() -> None:
    img = _images(1, 32, seed=3)[0]
    edited = img.copy()
    edited[16:24, 24:32] = 1.0 - edited[16:24, 24:32]

    before = extract_patch_features(ENCODER, img, (4, 4))
    after = extract_patch_features(ENCODER, edited, (4, 4))

    changed = [
        (a.grid_row, a.grid_col)
        for a, b in zip(before, after)
        if not np.array_equal(a.vector, b.vector)
    ]
    assert changed == [(2, 3)]


def test_grid_larger_than_image_is_rejected() -> None:
    with pytest.raises(ValueError):
        tile_image(np.zeros((8, 8, 3)), (9, 9))


def test_full_ratio_keeps_a_permutation_of_all_candidates() -> None:
    points = _f32_points(25)

    bank = greedy_coreset(points, 1.0, seed=4)

    assert sorted(bank.selection_order.tolist()) == list(range(25))
    assert np.array_equal(bank.features, points[bank.selection_order])


def test_coreset_size_is_the_ceiling_of_the_ratio() -> None:
    assert coreset_size(0.1, 30) == 3
    assert coreset_size(0.25, 10) == 3
    assert coreset_size(0.1, 30, min_size=10) == 10
    assert coreset_size(0.1, 5, min_size=10) == 5
    assert len(greedy_coreset(_f32_points(50), 0.1, seed=0)) == 5


def test_default_floor_keeps_a_usable_bank_at_the_smallest_ratio() -> None:
    # 20 training images on the default 8x8 grid
    assert coreset_size(0.01, 1280, DEFAULT_MIN_BANK_SIZE) == 256
    assert coreset_size(0.1, 1280, DEFAULT_MIN_BANK_SIZE) == 256
    assert coreset_size(0.5, 1280, DEFAULT_MIN_BANK_SIZE) == 640


def test_coreset_is_a_subset_with_shrinking_selection_distances() -> None:
    points = _f32_points(40, seed=5)

    bank = greedy_coreset(points, 0.5, seed=1)

    assert len(set(bank.selection_order.tolist())) == len(bank) == 20
    distances = bank.selection_distances[1:]
    assert np.all(np.diff(distances) <= 0)
    assert np.all(distances > 0)


def test_first_element_comes_from_the_seed() -> None:
    points = np.array([[0.0], [10.0]], dtype=np.float32)

    for seed in range(4):
        bank = greedy_coreset(points, 0.5, seed=seed)
        expected = int(make_rng(seed, "coreset").integers(2))
        assert bank.selection_order.tolist() == [expected]
        assert bank.features[0, 0] == points[expected, 0]


def test_second_element_is_the_farthest_candidate() -> None:
    points = np.array([[0.0], [1.0], [2.0], [10.0]], dtype=np.float32)
    seed = next(s for s in range(100) if int(make_rng(s, "coreset").integers(4)) == 0)

    bank = greedy_coreset(points, 0.5, seed=seed)

    assert bank.selection_order.tolist() == [0, 3]
    assert bank.selection_distances[1] == pytest.approx(10.0)


def test_greedy_radius_is_within_twice_the_optimum() -> None:
    points = _f32_points(20, dim=2, seed=6).astype(np.float64)
    pairwise = cdist(points, points)

    bank = greedy_coreset(points, 0.25, seed=2)

    greedy_radius = pairwise[:, bank.selection_order].min(axis=1).max()
    optimum = min(
        pairwise[:, list(subset)].min(axis=1).max()
        for subset in itertools.combinations(range(20), len(bank))
    )
    assert len(bank) == 5
    assert greedy_radius <= 2.0 * optimum + 1e-9


def test_equal_seeds_select_equal_coresets() -> None:
    points = _f32_points(30, seed=7)

    first = greedy_coreset(points, 0.3, seed=9)
    second = greedy_coreset(points, 0.3, seed=9)

    assert np.array_equal(first.selection_order, second.selection_order)


def test_invalid_coreset_inputs_are_rejected() -> None:
    with pytest.raises(ValueError):
        greedy_coreset(np.empty((0, 3)), 0.5, seed=0)
    for ratio in (0.0, 1.5):
        with pytest.raises(ValueError):
            greedy_coreset(_f32_points(5), ratio, seed=0)


def test_build_bank_clamps_to_the_minimum_size() -> None:
    bank = build_bank(ENCODER, _images(2), (2, 2), 0.01, seed=0)

    assert len(bank) == 8
    assert bank.grid_dims == (2, 2)
    assert bank.encoder_checksum == encoder_digest(ENCODER)


def test_score_by_hand() -> None:
    bank = _bank([[0.0, 0.0]])
    patch = PatchFeature(np.array([3.0, 4.0]), 0, 0)

    result = score_image(bank, [patch], (4, 4), smooth_sigma=0.0)

    assert result.image_score == 5.0
    assert np.all(result.heatmap == 5.0)


def test_nearest_distances_match_brute_force() -> None:
    bank = _bank(_f32_points(30, seed=8))
    queries = _f32_points(12, seed=9)

    distances = nearest_distances(bank, queries)

    expected = [
        min(np.linalg.norm(q.astype(np.float64) - b.astype(np.float64)) for b in bank.features)
        for q in queries
    ]
    assert distances == pytest.approx(expected, rel=1e-12)


def test_training_images_score_zero_against_a_full_bank() -> None:
    images = _images(3, seed=10)
    bank = build_bank(ENCODER, images, (2, 2), 1.0, seed=0)

    for img in images:
        result = score_image(bank, extract_patch_features(ENCODER, img, (2, 2)), (16, 16))
        assert result.image_score == 0.0
        assert np.all(result.heatmap == 0.0)


def test_unsmoothed_heatmap_peaks_at_the_image_score() -> None:
    bank = build_bank(ENCODER, _images(2, seed=11), (2, 2), 1.0, seed=0)
    query = _images(1, seed=12)[0]

    result = score_image(bank, extract_patch_features(ENCODER, query, (2, 2)), (16, 16), 0.0)

    assert result.image_score > 0
    assert result.heatmap.max() == pytest.approx(result.image_score)
    assert result.heatmap.shape == (16, 16)


def test_patch_count_must_match_the_bank_grid() -> None:
    bank = build_bank(ENCODER, _images(1), (2, 2), 1.0, seed=0)
    patches = extract_patch_features(ENCODER, _images(1)[0], (1, 1))

    with pytest.raises(ValueError):
        score_image(bank, patches, (16, 16))


def test_bank_file_round_trip(tmp_path) -> None:
    bank = build_bank(ENCODER, _images(2), (2, 2), 0.5, seed=3, min_size=0)
    path = tmp_path / "bank" / "bank.csb"

    save_bank(bank, path)
    loaded = load_bank(path, expected_checksum=encoder_digest(ENCODER))

    assert loaded.same_content(bank)


def test_bank_from_another_encoder_is_refused(tmp_path) -> None:
    path = tmp_path / "bank.csb"
    save_bank(build_bank(ENCODER, _images(1), (2, 2), 1.0, seed=0), path)

    with pytest.raises(ChecksumMismatchError):
        load_bank(path, expected_checksum=encoder_digest(init_encoder(1, (4, 4), 6)))


def test_truncated_bank_file_is_rejected(tmp_path) -> None:
    path = tmp_path / "bank.csb"
    save_bank(build_bank(ENCODER, _images(1), (2, 2), 1.0, seed=0), path)
    path.write_bytes(path.read_bytes()[:-5])

    with pytest.raises(ArtifactFormatError):
        load_bank(path)


def test_missing_bank_file(tmp_path) -> None:
    with pytest.raises(MissingArtifactError):
        load_bank(tmp_path / "absent.csb")
