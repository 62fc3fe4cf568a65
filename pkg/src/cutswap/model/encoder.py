"""Compact convolutional encoder and MLP head with exact reverse-mode gradients.

Images travel channels-last as ``(B, H, W, C)`` float64 batches. Every
convolution is 3x3, stride 2, zero padding 1, followed by ``max(0, .)``;
global average pooling and a linear projection produce the D-dimensional
feature that the head classifies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray
from scipy.special import logsumexp

from cutswap.models import ImageArray
from cutswap.services.exceptions import NumericFailureError
from cutswap.utils.seeding import make_rng

LOGGER = logging.getLogger(__name__)

KERNEL = 3
STRIDE = 2
PAD = 1
IN_CHANNELS = 3
DEFAULT_CHANNELS = (8, 16, 32)
DEFAULT_FEATURE_DIM = 64
MIN_INPUT_SIZE = 8

Array = NDArray[np.float64]


@dataclass(eq=False)
class EncoderParams:
    """Convolution stack plus the final projection to ``feature_dim``."""

    conv_weights: tuple[Array, ...]
    conv_biases: tuple[Array, ...]
    proj_weight: Array
    proj_bias: Array

    @property
    def feature_dim(self) -> int:
        return int(self.proj_weight.shape[0])

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(w.shape[0]) for w in self.conv_weights)

    @property
    def in_channels(self) -> int:
        return int(self.conv_weights[0].shape[1]) if self.conv_weights else IN_CHANNELS

    def tensors(self) -> list[Array]:
        """Parameters in declaration order."""
        ordered: list[Array] = []
        for weight, bias in zip(self.conv_weights, self.conv_biases):
            ordered.extend((weight, bias))
        ordered.extend((self.proj_weight, self.proj_bias))
        return ordered

    def with_tensors(self, tensors: Sequence[Array]) -> EncoderParams:
        """Same architecture, new values (declaration order)."""
        count = len(self.conv_weights)
        if len(tensors) != 2 * count + 2:
            raise ValueError(f"Expected {2 * count + 2} tensors, got {len(tensors)}.")
        return EncoderParams(
            conv_weights=tuple(tensors[0 : 2 * count : 2]),
            conv_biases=tuple(tensors[1 : 2 * count : 2]),
            proj_weight=tensors[2 * count],
            proj_bias=tensors[2 * count + 1],
        )

    def copy(self) -> EncoderParams:
        return self.with_tensors([t.copy() for t in self.tensors()])


@dataclass(eq=False)
class HeadParams:
    """Perceptron from D features to C class logits (ReLU between layers)."""

    weights: tuple[Array, ...]
    biases: tuple[Array, ...]

    @property
    def num_classes(self) -> int:
        return int(self.weights[-1].shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.weights[0].shape[1])

    def tensors(self) -> list[Array]:
        ordered: list[Array] = []
        for weight, bias in zip(self.weights, self.biases):
            ordered.extend((weight, bias))
        return ordered

    def with_tensors(self, tensors: Sequence[Array]) -> HeadParams:
        if len(tensors) != 2 * len(self.weights):
            raise ValueError(f"Expected {2 * len(self.weights)} tensors, got {len(tensors)}.")
        return HeadParams(weights=tuple(tensors[0::2]), biases=tuple(tensors[1::2]))

    def copy(self) -> HeadParams:
        return self.with_tensors([t.copy() for t in self.tensors()])


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    scale = fan_in**-0.5
    return rng.uniform(-scale, scale, size=shape)


def init_encoder(
    seed: int,
    channels: Sequence[int] = DEFAULT_CHANNELS,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    in_channels: int = IN_CHANNELS,
) -> EncoderParams:
    """Uniform ``[-s, s]`` weights with ``s = fan_in ** -0.5``."""
    if feature_dim < 2:
        raise ValueError(f"feature_dim must be >= 2, got {feature_dim}.")
    if not channels:
        raise ValueError("At least one convolution block is required.")
    rng = make_rng(seed, "encoder-init")
    weights, biases = [], []
    previous = in_channels
    for out_channels in channels:
        fan_in = previous * KERNEL * KERNEL
        weights.append(_uniform(rng, (out_channels, previous, KERNEL, KERNEL), fan_in))
        biases.append(_uniform(rng, (out_channels,), fan_in))
        previous = out_channels
    return EncoderParams(
        conv_weights=tuple(weights),
        conv_biases=tuple(biases),
        proj_weight=_uniform(rng, (feature_dim, previous), previous),
        proj_bias=_uniform(rng, (feature_dim,), previous),
    )


def init_head(
    seed: int, feature_dim: int, num_classes: int, hidden: int | None = None
) -> HeadParams:
    """Two-layer head by default; ``hidden=0`` gives a single linear layer."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}.")
    rng = make_rng(seed, "head-init")
    widths = [feature_dim]
    hidden = feature_dim if hidden is None else hidden
    if hidden > 0:
        widths.append(hidden)
    widths.append(num_classes)
    weights = tuple(
        _uniform(rng, (fan_out, fan_in), fan_in) for fan_in, fan_out in zip(widths, widths[1:])
    )
    biases = tuple(
        _uniform(rng, (fan_out,), fan_in) for fan_in, fan_out in zip(widths, widths[1:])
    )
    return HeadParams(weights=weights, biases=biases)


def conv_output_size(size: int) -> int:
    return (size + 2 * PAD - KERNEL) // STRIDE + 1


def _im2col(x: Array) -> Array:
    """``(B, H, W, C)`` -> ``(B, Ho, Wo, C, 3, 3)`` strided receptive fields."""
    padded = np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD), (0, 0)))
    windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))
    return np.ascontiguousarray(windows[:, ::STRIDE, ::STRIDE])


def _apply_kernel(cols: Array, weight: Array, bias: Array) -> Array:
    return np.tensordot(cols, weight, axes=([3, 4, 5], [1, 2, 3])) + bias


def conv2d(x: Array, weight: Array, bias: Array) -> Array:
    """Stride-2, pad-1 3x3 convolution of a ``(B, H, W, C)`` batch (no activation)."""
    return _apply_kernel(_im2col(x), weight, bias)


def _col2im(dcols: Array, x_shape: tuple[int, ...]) -> Array:
    batch, height, width, channels = x_shape
    out_h, out_w = dcols.shape[1], dcols.shape[2]
    dpadded = np.zeros((batch, height + 2 * PAD, width + 2 * PAD, channels))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dpadded[
                :, ki : ki + STRIDE * out_h : STRIDE, kj : kj + STRIDE * out_w : STRIDE, :
            ] += dcols[..., ki, kj]
    return dpadded[:, PAD : PAD + height, PAD : PAD + width, :]


@dataclass
class _ConvCache:
    x_shape: tuple[int, ...]
    cols: Array
    pre_activation: Array


@dataclass
class _ForwardCache:
    convs: list[_ConvCache]
    pooled_input_shape: tuple[int, ...]
    pooled: Array
    features: Array
    head_inputs: list[Array]
    head_pre: list[Array]


def _as_batch(images: ImageArray | Array) -> Array:
    batch = np.asarray(images, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4:
        raise ValueError(f"Expected (B, H, W, C) or (H, W, C) input, got shape {batch.shape}.")
    return batch


def _encode_forward(params: EncoderParams, batch: Array) -> tuple[Array, list[_ConvCache], Array]:
    if batch.shape[3] != params.in_channels:
        raise ValueError(f"Encoder expects {params.in_channels} channels, got {batch.shape[3]}.")
    if min(batch.shape[1], batch.shape[2]) < MIN_INPUT_SIZE:
        raise ValueError(
            f"Encoder input must be at least {MIN_INPUT_SIZE}px, got {batch.shape[1:3]}."
        )
    caches = []
    activation = batch
    for weight, bias in zip(params.conv_weights, params.conv_biases):
        cols = _im2col(activation)
        pre = _apply_kernel(cols, weight, bias)
        caches.append(_ConvCache(x_shape=activation.shape, cols=cols, pre_activation=pre))
        activation = np.maximum(pre, 0.0)
    pooled = activation.mean(axis=(1, 2))
    return activation, caches, pooled


def encode_batch(params: EncoderParams, images: ImageArray | Array) -> Array:
    """Features ``(B, D)`` for a batch of images."""
    _, _, pooled = _encode_forward(params, _as_batch(images))
    return pooled @ params.proj_weight.T + params.proj_bias


def encode(params: EncoderParams, img: ImageArray, resolution: int | None = None) -> Array:
    """Feature vector in R^D for a single image."""
    if resolution is not None and img.shape[:2] != (resolution, resolution):
        raise ValueError(
            f"Image is {img.shape[0]}x{img.shape[1]} but the working resolution is {resolution}."
        )
    return encode_batch(params, img)[0]


def classify_batch(head: HeadParams, features: Array) -> Array:
    """Logits ``(B, C)`` for a batch of features."""
    hidden = np.atleast_2d(features)
    if hidden.shape[1] != head.feature_dim:
        raise ValueError(f"Head expects {head.feature_dim} features, got {hidden.shape[1]}.")
    last = len(head.weights) - 1
    for index, (weight, bias) in enumerate(zip(head.weights, head.biases)):
        hidden = hidden @ weight.T + bias
        if index < last:
            hidden = np.maximum(hidden, 0.0)
    return hidden


def classify(head: HeadParams, g: Array) -> Array:
    """Logits in R^C for one feature vector."""
    if np.ndim(g) != 1:
        raise ValueError(f"classify expects a single feature vector, got shape {np.shape(g)}.")
    return classify_batch(head, g)[0]


def softmax(logits: Array) -> Array:
    shifted = logits - logsumexp(logits, axis=-1, keepdims=True)
    return np.exp(shifted)


def cross_entropy(logits: Array, label: int) -> float:
    """Softmax cross-entropy of one logit vector against ``label``."""
    return float(logsumexp(logits) - logits[label])


def loss_cs(logits_pos: Array, negatives: Sequence[tuple[Array, int]]) -> float:
    """Self-supervised loss for one positive and its labelled negatives.

    Each pair contributes ``CE(pos, 0) + CE(neg, label)``; the result is the
    mean over all ``2 n`` terms (``CE(pos, 0)`` alone when ``n == 0``).
    """
    positive_term = cross_entropy(np.asarray(logits_pos, dtype=np.float64), 0)
    if not negatives:
        return positive_term
    negative_terms = [
        cross_entropy(np.asarray(logits, dtype=np.float64), label) for logits, label in negatives
    ]
    return (len(negatives) * positive_term + sum(negative_terms)) / (2 * len(negatives))


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    """Images with class labels and per-sample loss weights."""

    images: Array
    labels: NDArray[np.intp]
    weights: Array

    def __post_init__(self) -> None:
        count = self.images.shape[0]
        if count == 0:
            raise ValueError("A training batch needs at least one sample.")
        if self.labels.shape != (count,) or self.weights.shape != (count,):
            raise ValueError("labels and weights must have one entry per image.")
        if np.any(self.weights < 0) or float(self.weights.sum()) <= 0:
            raise ValueError("Sample weights must be non-negative with a positive total.")


def _forward(params: EncoderParams, head: HeadParams, images: Array) -> tuple[Array, _ForwardCache]:
    activation, convs, pooled = _encode_forward(params, images)
    features = pooled @ params.proj_weight.T + params.proj_bias
    head_inputs, head_pre = [], []
    hidden = features
    last = len(head.weights) - 1
    for index, (weight, bias) in enumerate(zip(head.weights, head.biases)):
        head_inputs.append(hidden)
        pre = hidden @ weight.T + bias
        head_pre.append(pre)
        hidden = np.maximum(pre, 0.0) if index < last else pre
    cache = _ForwardCache(
        convs=convs,
        pooled_input_shape=activation.shape,
        pooled=pooled,
        features=features,
        head_inputs=head_inputs,
        head_pre=head_pre,
    )
    return hidden, cache


def batch_loss(params: EncoderParams, head: HeadParams, batch: TrainingBatch) -> float:
    """Weighted mean cross-entropy of a batch (forward pass only)."""
    logits, _ = _forward(params, head, batch.images)
    per_sample = logsumexp(logits, axis=1) - logits[np.arange(logits.shape[0]), batch.labels]
    return float(np.sum(batch.weights * per_sample) / np.sum(batch.weights))


def activation_pattern(
    params: EncoderParams, head: HeadParams, images: Array
) -> NDArray[np.bool_]:
    """Sign pattern of every rectified pre-activation, flattened."""
    _, cache = _forward(params, head, images)
    rectified = [layer.pre_activation for layer in cache.convs] + cache.head_pre[:-1]
    return np.concatenate([(values > 0).ravel() for values in rectified])


def backward(
    params: EncoderParams, head: HeadParams, batch: TrainingBatch
) -> tuple[float, EncoderParams, HeadParams]:
    """Loss and exact gradients of the weighted mean cross-entropy.

    Gradients are returned in the same containers as the parameters.
    """
    logits, cache = _forward(params, head, batch.images)
    if not np.all(np.isfinite(logits)):
        raise NumericFailureError("Non-finite logits in forward pass.")
    count = logits.shape[0]
    rows = np.arange(count)
    per_sample = logsumexp(logits, axis=1) - logits[rows, batch.labels]
    normalizer = float(np.sum(batch.weights))
    loss = float(np.sum(batch.weights * per_sample) / normalizer)

    dlogits = softmax(logits)
    dlogits[rows, batch.labels] -= 1.0
    dlogits *= (batch.weights / normalizer)[:, None]

    head_w_grads: list[Array] = [np.empty(0)] * len(head.weights)
    head_b_grads: list[Array] = [np.empty(0)] * len(head.weights)
    upstream = dlogits
    for index in reversed(range(len(head.weights))):
        if index < len(head.weights) - 1:
            upstream = upstream * (cache.head_pre[index] > 0)
        head_w_grads[index] = upstream.T @ cache.head_inputs[index]
        head_b_grads[index] = upstream.sum(axis=0)
        upstream = upstream @ head.weights[index]

    dfeatures = upstream
    proj_w_grad = dfeatures.T @ cache.pooled
    proj_b_grad = dfeatures.sum(axis=0)
    dpooled = dfeatures @ params.proj_weight
    _, out_h, out_w, _ = cache.pooled_input_shape
    dactivation = np.broadcast_to(
        dpooled[:, None, None, :] / (out_h * out_w), cache.pooled_input_shape
    )

    conv_w_grads: list[Array] = [np.empty(0)] * len(cache.convs)
    conv_b_grads: list[Array] = [np.empty(0)] * len(cache.convs)
    for index in reversed(range(len(cache.convs))):
        layer = cache.convs[index]
        dpre = dactivation * (layer.pre_activation > 0)
        conv_w_grads[index] = np.tensordot(dpre, layer.cols, axes=([0, 1, 2], [0, 1, 2]))
        conv_b_grads[index] = dpre.sum(axis=(0, 1, 2))
        if index > 0:
            dcols = np.tensordot(dpre, params.conv_weights[index], axes=([3], [0]))
            dactivation = _col2im(dcols, layer.x_shape)

    encoder_grads = EncoderParams(
        conv_weights=tuple(conv_w_grads),
        conv_biases=tuple(conv_b_grads),
        proj_weight=proj_w_grad,
        proj_bias=proj_b_grad,
    )
    head_grads = HeadParams(weights=tuple(head_w_grads), biases=tuple(head_b_grads))
    for tensor in (*encoder_grads.tensors(), *head_grads.tensors()):
        if not np.all(np.isfinite(tensor)):
            raise NumericFailureError("Non-finite gradient encountered in backward pass.")
    return loss, encoder_grads, head_grads
