"""Plain SGD training of encoder and head, gradient checking and diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from cutswap.augment.cutswap import NORMAL_CLASS
from cutswap.augment.stream import PairSource, TrainingGroup
from cutswap.model.encoder import (
    DEFAULT_CHANNELS,
    DEFAULT_FEATURE_DIM,
    EncoderParams,
    HeadParams,
    TrainingBatch,
    activation_pattern,
    backward,
    batch_loss,
    encode_batch,
    init_encoder,
    init_head,
)
from cutswap.models import ProgressReporter, silent_progress
from cutswap.services.exceptions import ConfigError, NumericFailureError, TrainingDivergedError
from cutswap.utils.seeding import derive_seed, make_rng

LOGGER = logging.getLogger(__name__)

BINARY_CLASSES = 2
THREE_WAY_CLASSES = 3
GRAD_CHECK_FLOOR = 1e-8
GRAD_CHECK_ATOL = 1e-9
KINK_RETRIES = 3


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyper-parameters and encoder geometry."""

    learning_rate: float = 0.03
    epochs: int = 32
    batch_size: int = 4
    seed: int | None = None
    three_way: bool = False
    feature_dim: int = DEFAULT_FEATURE_DIM
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    head_hidden: int | None = None

    def __post_init__(self) -> None:
        # zero is accepted so a run can be replayed with frozen parameters
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.feature_dim < 2:
            raise ConfigError(f"train.feature_dim must be >= 2, got {self.feature_dim}")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"train.channels must be positive, got {self.channels}")
        if self.head_hidden is not None and self.head_hidden < 0:
            raise ConfigError(f"train.head_hidden must be >= 0, got {self.head_hidden}")

    @property
    def num_classes(self) -> int:
        return THREE_WAY_CLASSES if self.three_way else BINARY_CLASSES

    @property
    def resolved_seed(self) -> int:
        return 0 if self.seed is None else self.seed


@dataclass(frozen=True, eq=False)
class TrainResult:
    encoder: EncoderParams
    head: HeadParams
    loss_curve: tuple[float, ...]
    initial_loss: float
    warnings: tuple[str, ...] = ()

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]


def group_batch(groups: Sequence[TrainingGroup]) -> TrainingBatch:
    """Stack groups into one weighted batch.

    The positive of a group with ``n`` negatives carries weight ``n`` (1 when
    there are none) and every negative weight 1, so a single group reproduces
    the per-pair mean of the self-supervised loss.
    """
    images, labels, weights = [], [], []
    for group in groups:
        images.append(group.positive)
        labels.append(NORMAL_CLASS)
        weights.append(float(max(len(group.negatives), 1)))
        for negative, label in group.negatives:
            images.append(negative)
            labels.append(label)
            weights.append(1.0)
    return TrainingBatch(
        images=np.stack(images).astype(np.float64),
        labels=np.asarray(labels, dtype=np.intp),
        weights=np.asarray(weights, dtype=np.float64),
    )


def _batches(
    groups: list[TrainingGroup], order: NDArray[np.intp], size: int
) -> list[TrainingBatch]:
    return [
        group_batch([groups[int(i)] for i in order[start : start + size]])
        for start in range(0, len(order), size)
    ]


def _check_labels(batch: TrainingBatch, num_classes: int) -> None:
    if batch.labels.size and int(batch.labels.max()) >= num_classes:
        raise ConfigError(
            f"Label {int(batch.labels.max())} is invalid for a {num_classes}-class head; "
            "enable train.three_way to train on scar negatives."
        )


def _sgd_step(
    params: EncoderParams,
    head: HeadParams,
    grads: tuple[EncoderParams, HeadParams],
    learning_rate: float,
) -> tuple[EncoderParams, HeadParams]:
    encoder_grads, head_grads = grads
    updated_encoder = params.with_tensors(
        [v - learning_rate * g for v, g in zip(params.tensors(), encoder_grads.tensors())]
    )
    updated_head = head.with_tensors(
        [v - learning_rate * g for v, g in zip(head.tensors(), head_grads.tensors())]
    )
    return updated_encoder, updated_head


def _all_finite(*containers: EncoderParams | HeadParams) -> bool:
    return all(np.all(np.isfinite(t)) for c in containers for t in c.tensors())


def train(
    source: PairSource,
    cfg: TrainConfig,
    *,
    initial: tuple[EncoderParams, HeadParams] | None = None,
    progress: ProgressReporter = silent_progress,
) -> TrainResult:
    """Run plain SGD over shuffled batches and record the per-epoch mean loss.

    Equal seeds give bitwise-equal parameters. A non-finite loss or gradient
    aborts with :class:`TrainingDivergedError` carrying the last finite
    ``(encoder, head)`` pair.
    """
    if len(source) == 0:
        raise ValueError("Training needs at least one image.")
    seed = cfg.resolved_seed
    if initial is None:
        encoder = init_encoder(derive_seed(seed, "encoder"), cfg.channels, cfg.feature_dim)
        head = init_head(
            derive_seed(seed, "head"), cfg.feature_dim, cfg.num_classes, cfg.head_hidden
        )
    else:
        encoder, head = initial[0].copy(), initial[1].copy()
    if head.num_classes != cfg.num_classes:
        raise ConfigError(f"Head has {head.num_classes} classes, expected {cfg.num_classes}.")

    curve: list[float] = []
    initial_loss = math.nan
    warnings: dict[str, None] = {}
    for epoch in range(cfg.epochs):
        groups = source.groups(epoch)
        for group in groups:
            warnings.update(dict.fromkeys(f"{group.source}: {w}" for w in group.warnings))
        order = make_rng(seed, "shuffle", epoch).permutation(len(groups))
        batches = _batches(groups, order, cfg.batch_size)
        for batch in batches:
            _check_labels(batch, cfg.num_classes)
        if epoch == 0:
            initial_loss = float(np.mean([batch_loss(encoder, head, b) for b in batches]))
        losses = []
        for batch in batches:
            try:
                loss, encoder_grads, head_grads = backward(encoder, head, batch)
            except NumericFailureError as exc:
                raise TrainingDivergedError(
                    f"Training diverged in epoch {epoch}: {exc}",
                    epoch=epoch,
                    last_good=(encoder, head),
                ) from exc
            candidate = _sgd_step(encoder, head, (encoder_grads, head_grads), cfg.learning_rate)
            if not math.isfinite(loss) or not _all_finite(*candidate):
                raise TrainingDivergedError(
                    f"Training diverged in epoch {epoch}: loss {loss}",
                    epoch=epoch,
                    last_good=(encoder, head),
                )
            encoder, head = candidate
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        LOGGER.debug("Epoch %d/%d mean loss %.6f", epoch + 1, cfg.epochs, curve[-1])
        progress(
            f"Epoch {epoch + 1}/{cfg.epochs} loss {curve[-1]:.4f}", 100.0 * (epoch + 1) / cfg.epochs
        )

    LOGGER.info(
        "Training finished: loss %.4f -> %.4f over %d epochs", initial_loss, curve[-1], cfg.epochs
    )
    return TrainResult(
        encoder=encoder,
        head=head,
        loss_curve=tuple(curve),
        initial_loss=initial_loss,
        warnings=tuple(warnings),
    )


def _relative_error(analytic: float, numeric: float) -> float:
    difference = abs(analytic - numeric)
    if difference <= GRAD_CHECK_ATOL:
        return 0.0
    return difference / max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)


def grad_check(
    params: EncoderParams,
    head: HeadParams,
    batch: TrainingBatch,
    eps: float = 1e-4,
    *,
    samples: int = 32,
    seed: int = 0,
    gradients: tuple[EncoderParams, HeadParams] | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Coordinates are drawn at random with at least one per tensor. When the
    ``+-eps`` step flips a rectifier the step is shrunk tenfold, up to three
    times, and the coordinate is skipped if it still straddles a kink.
    ``gradients`` replaces the analytic values, which lets callers verify
    that corrupted gradients are detected.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}.")
    if gradients is None:
        _, encoder_grads, head_grads = backward(params, head, batch)
    else:
        encoder_grads, head_grads = gradients
    values = [t.copy() for t in (*params.tensors(), *head.tensors())]
    analytic = [*encoder_grads.tensors(), *head_grads.tensors()]
    split = len(params.tensors())

    def evaluate(tensors: list[NDArray[np.float64]]) -> tuple[float, NDArray[np.bool_]]:
        enc = params.with_tensors(tensors[:split])
        hd = head.with_tensors(tensors[split:])
        return batch_loss(enc, hd, batch), activation_pattern(enc, hd, batch.images)

    _, base_pattern = evaluate(values)
    rng = make_rng(seed, "grad-check")
    picks: list[tuple[int, int]] = [
        (t, int(rng.integers(values[t].size))) for t in range(len(values))
    ]
    sizes = np.array([v.size for v in values], dtype=np.float64)
    extra = max(samples - len(picks), 0)
    for tensor_index in rng.choice(len(values), size=extra, p=sizes / sizes.sum()):
        picks.append((int(tensor_index), int(rng.integers(values[tensor_index].size))))

    worst = 0.0
    skipped = 0
    for tensor_index, flat_index in picks:
        tensor = values[tensor_index]
        original = float(tensor.flat[flat_index])
        step = eps
        numeric: float | None = None
        for _ in range(KINK_RETRIES + 1):
            tensor.flat[flat_index] = original + step
            loss_plus, pattern_plus = evaluate(values)
            tensor.flat[flat_index] = original - step
            loss_minus, pattern_minus = evaluate(values)
            tensor.flat[flat_index] = original
            if np.array_equal(pattern_plus, base_pattern) and np.array_equal(
                pattern_minus, base_pattern
            ):
                numeric = (loss_plus - loss_minus) / (2.0 * step)
                break
            step /= 10.0
        if numeric is None:
            skipped += 1
            continue
        error = _relative_error(float(analytic[tensor_index].flat[flat_index]), numeric)
        worst = max(worst, error)
    if skipped:
        LOGGER.debug("Gradient check skipped %d coordinate(s) straddling a rectifier kink", skipped)
    return worst


def _mean_pairwise_cosine(
    first: NDArray[np.float64], second: NDArray[np.float64], same: bool
) -> float:
    def unit(rows: NDArray[np.float64]) -> NDArray[np.float64]:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        return rows / np.where(norms == 0.0, 1.0, norms)

    similarity = unit(first) @ unit(second).T
    if same:
        count = similarity.shape[0]
        if count < 2:
            return math.nan
        return float((similarity.sum() - np.trace(similarity)) / (count * (count - 1)))
    return float(similarity.mean())


@dataclass(frozen=True)
class SeparationReport:
    """Mean cosine similarities among positives and across positives and negatives."""

    within_positive: float
    positive_negative: float

    @property
    def separated(self) -> bool:
        return self.within_positive > self.positive_negative


def feature_separation(params: EncoderParams, groups: Sequence[TrainingGroup]) -> SeparationReport:
    """Diagnostic comparing positive/positive and positive/negative feature cosines."""
    positives = np.stack([group.positive for group in groups])
    negatives = [negative for group in groups for negative, _ in group.negatives]
    if not negatives:
        raise ValueError("feature_separation needs at least one negative sample.")
    positive_features = encode_batch(params, positives)
    negative_features = encode_batch(params, np.stack(negatives))
    report = SeparationReport(
        within_positive=_mean_pairwise_cosine(positive_features, positive_features, same=True),
        positive_negative=_mean_pairwise_cosine(positive_features, negative_features, same=False),
    )
    LOGGER.info(
        "Feature separation: positive/positive %.4f, positive/negative %.4f",
        report.within_positive,
        report.positive_negative,
    )
    return report
