"""Image- and pixel-level ROC-AUC via the Mann-Whitney rank statistic."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import rankdata

from cutswap.models import MaskArray

LOGGER = logging.getLogger(__name__)

PIXEL_AUC_MODES = ("global", "per_image")


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Scores with parallel binary labels (1 = anomalous)."""

    scores: NDArray[np.float64]
    labels: NDArray[np.bool_]

    @classmethod
    def of(cls, scores: ArrayLike, labels: ArrayLike) -> ScoredSet:
        return cls(
            scores=np.asarray(scores, dtype=np.float64).ravel(),
            labels=np.asarray(labels).astype(bool).ravel(),
        )

    def __post_init__(self) -> None:
        if self.scores.shape != self.labels.shape:
            raise ValueError(
                f"{self.scores.size} scores but {self.labels.size} labels; lengths must match."
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("Scores must be finite.")

    @property
    def has_both_classes(self) -> bool:
        positives = int(self.labels.sum())
        return 0 < positives < self.labels.size


def roc_auc(scored: ScoredSet) -> float:
    """Probability that an anomalous score beats a normal one, ties counted half."""
    if not scored.has_both_classes:
        raise ValueError("ROC-AUC needs at least one anomalous and one normal sample.")
    ranks = rankdata(scored.scores, method="average")
    positives = int(scored.labels.sum())
    negatives = scored.labels.size - positives
    u_statistic = float(ranks[scored.labels].sum()) - positives * (positives + 1) / 2.0
    return u_statistic / (positives * negatives)


def _check_pairs(heatmaps: Sequence[NDArray[np.float64]], masks: Sequence[MaskArray]) -> None:
    if len(heatmaps) != len(masks):
        raise ValueError(f"{len(heatmaps)} heatmaps but {len(masks)} masks.")
    if not heatmaps:
        raise ValueError("pixel_auc needs at least one heatmap.")
    for index, (heatmap, mask) in enumerate(zip(heatmaps, masks)):
        if heatmap.shape != mask.shape:
            raise ValueError(
                f"Heatmap {index} is {heatmap.shape} but its mask is {mask.shape}."
            )


def pixel_auc(
    heatmaps: Sequence[NDArray[np.float64]],
    masks: Sequence[MaskArray],
    mode: str = "global",
) -> float:
    """Pixel-level AUC.

    ``global`` pools every pixel of every image into one ranking;
    ``per_image`` averages the AUC of each image whose mask holds both
    classes.
    """
    _check_pairs(heatmaps, masks)
    if mode == "global":
        pooled = ScoredSet.of(
            np.concatenate([h.ravel() for h in heatmaps]),
            np.concatenate([m.ravel() for m in masks]),
        )
        if not pooled.has_both_classes:
            raise ValueError("The mask union is all normal or all anomalous; pixel AUC undefined.")
        return roc_auc(pooled)
    if mode == "per_image":
        values = []
        for heatmap, mask in zip(heatmaps, masks):
            scored = ScoredSet.of(heatmap, mask)
            if scored.has_both_classes:
                values.append(roc_auc(scored))
        if not values:
            raise ValueError("No image has both normal and anomalous pixels; pixel AUC undefined.")
        LOGGER.debug("Per-image pixel AUC averaged over %d image(s)", len(values))
        return float(np.mean(values))
    raise ValueError(f"mode must be one of {PIXEL_AUC_MODES}, got {mode!r}.")
