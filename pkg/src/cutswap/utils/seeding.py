"""Deterministic seed derivation for every stochastic stage."""

from __future__ import annotations

import hashlib

import numpy as np

SEED_BITS = 63


def derive_seed(base: int, *tokens: object) -> int:
    """Hash a base seed and a path of tokens into an independent child seed.

    The same ``(base, tokens)`` always yields the same seed, so per-epoch,
    per-image and per-level draws never depend on execution order.
    """
    token = "-".join([str(int(base)), *(str(part) for part in tokens)])
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << SEED_BITS) - 1)


def make_rng(base: int, *tokens: object) -> np.random.Generator:
    """Return a numpy generator seeded from :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(base, *tokens) if tokens else int(base))
