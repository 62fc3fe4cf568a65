import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cutswap.augment.cluster import (
    fit_map,
    kmeans_1d,
    max_saliency_cluster,
    min_saliency_cluster,
    top_saliency_pixels,
)
from cutswap.models import SaliencyMap
from cutswap.services.exceptions import DegenerateMapError

unit_values = arrays(
    np.float64,
    st.integers(1, 60),
    elements=st.floats(0.0, 1.0, allow_nan=False, allow_subnormal=False),
)


def _optimal_inertia(values: np.ndarray, k: int) -> float:
    """Best inertia over every contiguous k-way split of the sorted values."""
    ordered = np.sort(values)
    best = np.inf
    for cuts in itertools.combinations(range(1, ordered.size), k - 1):
        groups = np.split(ordered, cuts)
        best = min(best, sum(float(((g - g.mean()) ** 2).sum()) for g in groups))
    return best


def _is_lloyd_fixed_point(values: np.ndarray, model) -> bool:
    for cluster, centroid in enumerate(model.centroids):
        members = values[model.assignment == cluster]
        if members.size and abs(members.mean() - centroid) > 1e-6:
            return False
    distances = np.abs(values[:, None] - model.centroids[None, :])
    assigned = distances[np.arange(values.size), model.assignment]
    return bool(np.all(assigned <= distances.min(axis=1) + 1e-12))


def test_single_cluster_is_the_mean() -> None:
    values = np.array([0.1, 0.4, 0.4, 0.9, 0.2])

    model = kmeans_1d(values, 1)

    assert model.centroids == pytest.approx([values.mean()])
    assert model.inertia == pytest.approx(values.var() * values.size)


def test_separated_groups_give_exact_centroids() -> None:
    model = kmeans_1d([0, 0, 0, 1, 1, 1], 2)

    assert list(model.centroids) == [0.0, 1.0]
    assert model.inertia == 0.0
    assert list(model.assignment) == [0, 0, 0, 1, 1, 1]


@pytest.mark.parametrize("k", [2, 3])
def test_lloyd_mostly_matches_exhaustive_contiguous_splits(k) -> None:
    rng = np.random.default_rng(2024 + k)
    within_tolerance = 0
    for _ in range(100):
        values = rng.integers(0, 20, size=12) / 19.0
        if np.unique(values).size < k:
            within_tolerance += 1
            continue
        model = kmeans_1d(values, k)
        if model.inertia <= _optimal_inertia(values, k) * 1.05 + 1e-12:
            within_tolerance += 1
        else:
            # local optimum, never an unfinished run
            assert _is_lloyd_fixed_point(values, model)
    assert within_tolerance >= 75


@given(unit_values, st.integers(1, 5))
@settings(deadline=None)
def test_inertia_never_increases(values, k) -> None:
    model = kmeans_1d(values, k)

    history = model.inertia_history
    assert all(later <= earlier + 1e-12 for earlier, later in zip(history, history[1:]))


@given(unit_values, st.integers(1, 5))
@settings(deadline=None)
def test_every_value_sits_with_its_nearest_centroid(values, k) -> None:
    model = kmeans_1d(values, k)

    distances = np.abs(values[:, None] - model.centroids[None, :])
    assigned = distances[np.arange(values.size), model.assignment]
    assert np.all(assigned <= distances.min(axis=1) + 1e-12)
    assert np.all(np.diff(model.centroids) >= 0)


@given(
    st.integers(0, 31),
    st.integers(1, 32),
    st.integers(1, 8),
    st.integers(1, 8),
)
@settings(deadline=None)
def test_bimodal_input_recovers_both_modes(low, gap, low_count, high_count) -> None:
    a, b = low / 64.0, (low + gap) / 64.0
    assume(b <= 1.0)
    values = [a] * low_count + [b] * high_count

    model = kmeans_1d(values, 2)

    assert list(model.centroids) == [a, b]


def test_equal_inputs_give_bit_identical_models() -> None:
    values = np.random.default_rng(7).uniform(size=200)

    first, second = kmeans_1d(values, 4), kmeans_1d(values, 4)

    assert np.array_equal(first.centroids, second.centroids)
    assert np.array_equal(first.assignment, second.assignment)


def test_empty_cluster_is_reseeded_on_the_worst_fit_value() -> None:
    model = kmeans_1d([0.0, 0.1, 0.2, 1.0], 3)

    assert np.all(np.bincount(model.assignment, minlength=3) > 0)
    assert model.centroids[-1] == 1.0


@pytest.mark.parametrize("k", [0, -2])
def test_non_positive_k_is_rejected(k) -> None:
    with pytest.raises(ValueError):
        kmeans_1d([0.1, 0.2], k)


def test_empty_input_is_rejected() -> None:
    with pytest.raises(ValueError):
        kmeans_1d([], 2)


def test_max_cluster_of_single_bright_pixel() -> None:
    data = np.zeros((5, 5))
    data[3, 1] = 1.0
    saliency_map = SaliencyMap(1, data)

    pixels = max_saliency_cluster(fit_map(saliency_map, 2, 100, 1e-6), saliency_map)

    assert pixels.as_tuples() == [(3, 1)]
    assert pixels.source_cluster == 1


def test_single_cluster_selects_the_whole_map() -> None:
    saliency_map = SaliencyMap(1, np.random.default_rng(0).uniform(size=(4, 6)))

    pixels = max_saliency_cluster(fit_map(saliency_map, 1, 100, 1e-6), saliency_map)

    assert len(pixels) == 24


def test_max_cluster_has_the_highest_mean_saliency() -> None:
    data = np.random.default_rng(11).uniform(size=(12, 12))
    saliency_map = SaliencyMap(4, data)
    model = fit_map(saliency_map, 4, 100, 1e-6)

    chosen = max_saliency_cluster(model, saliency_map)

    chosen_mean = data[tuple(chosen.coords.T)].mean()
    for cluster in range(model.k):
        members = data.ravel()[model.members(cluster)]
        if members.size:
            assert chosen_mean >= members.mean()


def test_min_cluster_holds_the_least_salient_pixel() -> None:
    data = np.random.default_rng(5).uniform(size=(6, 6))
    saliency_map = SaliencyMap(2, data)

    pixels = min_saliency_cluster(fit_map(saliency_map, 3, 100, 1e-6), saliency_map)

    assert tuple(np.unravel_index(np.argmin(data), data.shape)) in pixels.as_tuples()


def test_empty_max_cluster_signals_degenerate_map() -> None:
    saliency_map = SaliencyMap(1, np.zeros((3, 3)))
    model = fit_map(saliency_map, 2, 100, 1e-6)

    with pytest.raises(DegenerateMapError):
        max_saliency_cluster(model, saliency_map)


def test_top_pixels_by_brute_force() -> None:
    data = np.random.default_rng(3).permutation(16).reshape(4, 4).astype(np.float64)
    saliency_map = SaliencyMap(1, data)

    pixels = top_saliency_pixels(saliency_map, 3)

    expected = {tuple(np.argwhere(data == value)[0]) for value in (15.0, 14.0, 13.0)}
    assert set(pixels.as_tuples()) == expected


def test_top_pixels_ties_follow_row_major_order() -> None:
    saliency_map = SaliencyMap(1, np.ones((3, 3)))

    assert top_saliency_pixels(saliency_map, 2).as_tuples() == [(0, 0), (0, 1)]


def test_top_pixels_with_full_count_is_the_whole_map() -> None:
    saliency_map = SaliencyMap(1, np.random.default_rng(1).uniform(size=(3, 5)))

    assert len(top_saliency_pixels(saliency_map, 15)) == 15


@pytest.mark.parametrize("count", [1, 17])
def test_top_pixels_rejects_invalid_counts(count) -> None:
    with pytest.raises(ValueError):
        top_saliency_pixels(SaliencyMap(1, np.zeros((4, 4))), count)
