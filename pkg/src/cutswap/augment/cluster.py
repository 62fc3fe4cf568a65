"""One-dimensional K-means over saliency intensities and guided pixel-set selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from cutswap.models import Coord, SaliencyMap
from cutswap.services.exceptions import DegenerateMapError

LOGGER = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6  # relative to the value range


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted centroids (ascending) with per-value assignments."""

    centroids: NDArray[np.float64]
    assignment: NDArray[np.intp]
    inertia: float
    iterations_run: int
    inertia_history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return int(self.centroids.size)

    @property
    def max_cluster(self) -> int:
        """Index of the largest centroid; among equal centroids the highest index wins."""
        reversed_argmax = int(np.argmax(self.centroids[::-1]))
        return self.k - 1 - reversed_argmax

    @property
    def min_cluster(self) -> int:
        return int(np.argmin(self.centroids))

    def members(self, cluster: int) -> NDArray[np.intp]:
        """Flat indices assigned to ``cluster``, in row-major order."""
        return np.flatnonzero(self.assignment == cluster)


@dataclass(frozen=True, eq=False)
class PixelSet:
    """Coordinates of the pixels eligible as anchors."""

    coords: NDArray[np.intp]
    source_cluster: int | None = None

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def as_tuples(self) -> list[Coord]:
        return [(int(r), int(c)) for r, c in self.coords]


def _assign(values: NDArray[np.float64], centroids: NDArray[np.float64]) -> NDArray[np.intp]:
    # argmin returns the first minimum, so ties go to the lower cluster id
    return np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)


def _inertia(
    values: NDArray[np.float64], centroids: NDArray[np.float64], assignment: NDArray[np.intp]
) -> float:
    return float(np.sum((values - centroids[assignment]) ** 2))


def _reseed_empty(
    values: NDArray[np.float64], centroids: NDArray[np.float64], assignment: NDArray[np.intp]
) -> tuple[NDArray[np.float64], NDArray[np.intp]]:
    """Move each empty cluster onto the currently worst-fit value."""
    counts = np.bincount(assignment, minlength=centroids.size)
    for cluster in np.flatnonzero(counts == 0):
        residual = np.abs(values - centroids[assignment])
        worst = int(np.argmax(residual))
        if residual[worst] == 0.0:
            break
        centroids[cluster] = values[worst]
        assignment = _assign(values, centroids)
    return centroids, assignment


def kmeans_1d(
    values: ArrayLike,
    k: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> ClusterModel:
    """Lloyd's algorithm on scalar values from equally spaced initial centers.

    ``tol`` is relative to the value range: iterations stop once the largest
    centroid movement falls below ``tol * (max - min)``. Empty clusters are
    re-seeded on the value farthest from its centroid (first in row-major
    order on ties). The returned centroids are sorted ascending with the
    assignment relabelled to match.
    """
    data = np.asarray(values, dtype=np.float64).ravel()
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}.")
    if data.size == 0:
        raise ValueError("kmeans_1d needs at least one value.")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}.")
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}.")

    low, high = float(data.min()), float(data.max())
    threshold = tol * (high - low)
    centroids = np.linspace(low, high, k)
    assignment = _assign(data, centroids)
    centroids, assignment = _reseed_empty(data, centroids, assignment)
    history = [_inertia(data, centroids, assignment)]
    iterations = 0
    for iterations in range(1, max_iters + 1):
        sums = np.bincount(assignment, weights=data, minlength=k)
        counts = np.bincount(assignment, minlength=k)
        updated = centroids.copy()
        filled = counts > 0
        updated[filled] = sums[filled] / counts[filled]
        movement = float(np.max(np.abs(updated - centroids)))
        centroids = updated
        assignment = _assign(data, centroids)
        centroids, assignment = _reseed_empty(data, centroids, assignment)
        history.append(_inertia(data, centroids, assignment))
        if movement <= threshold:
            break

    order = np.argsort(centroids, kind="stable")
    relabel = np.empty(k, dtype=np.intp)
    relabel[order] = np.arange(k)
    centroids = centroids[order]
    assignment = relabel[assignment]
    return ClusterModel(
        centroids=centroids,
        assignment=assignment,
        inertia=_inertia(data, centroids, assignment),
        iterations_run=iterations,
        inertia_history=tuple(history),
    )


def fit_map(saliency_map: SaliencyMap, k: int, max_iters: int, tol: float) -> ClusterModel:
    """Cluster the intensities of one saliency map in row-major order."""
    return kmeans_1d(saliency_map.data.ravel(), k, max_iters, tol)


def cluster_pixels(model: ClusterModel, saliency_map: SaliencyMap, cluster: int) -> PixelSet:
    """Coordinates of every pixel assigned to ``cluster``."""
    if model.assignment.size != saliency_map.data.size:
        raise ValueError("Cluster model was not fitted on this map.")
    flat = model.members(cluster)
    if flat.size == 0:
        raise DegenerateMapError(
            f"Cluster {cluster} of level {saliency_map.level_index} is empty."
        )
    rows, cols = np.unravel_index(flat, saliency_map.shape)
    return PixelSet(coords=np.stack([rows, cols], axis=1), source_cluster=cluster)


def max_saliency_cluster(model: ClusterModel, saliency_map: SaliencyMap) -> PixelSet:
    """Pixels of the cluster with the largest centroid."""
    return cluster_pixels(model, saliency_map, model.max_cluster)


def min_saliency_cluster(model: ClusterModel, saliency_map: SaliencyMap) -> PixelSet:
    """Pixels of the cluster with the smallest centroid."""
    return cluster_pixels(model, saliency_map, model.min_cluster)


def random_saliency_cluster(
    model: ClusterModel, saliency_map: SaliencyMap, rng: np.random.Generator
) -> PixelSet:
    """Pixels of a uniformly chosen non-empty cluster."""
    counts = np.bincount(model.assignment, minlength=model.k)
    candidates = np.flatnonzero(counts > 0)
    return cluster_pixels(model, saliency_map, int(rng.choice(candidates)))


def top_saliency_pixels(saliency_map: SaliencyMap, count: int) -> PixelSet:
    """The ``count`` most salient pixels, ties broken by row-major order."""
    flat = saliency_map.data.ravel()
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}.")
    if count > flat.size:
        raise ValueError(f"count {count} exceeds the {flat.size} pixels of the map.")
    order = np.argsort(-flat, kind="stable")[:count]
    rows, cols = np.unravel_index(np.sort(order), saliency_map.shape)
    return PixelSet(coords=np.stack([rows, cols], axis=1))


def whole_image_pixels(saliency_map: SaliencyMap) -> PixelSet:
    """Every pixel of the map."""
    rows, cols = np.indices(saliency_map.shape)
    return PixelSet(coords=np.stack([rows.ravel(), cols.ravel()], axis=1))
