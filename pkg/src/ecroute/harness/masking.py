from __future__ import annotations

import math

import numpy as np

from ..grouping import Grouping, regroup_tokens, ungroup_tokens

__all__ = ["kept_count", "mask_tokens", "sample_keep", "regroup_tokens", "ungroup_tokens", "Grouping"]


def kept_count(seq_len: int, ratio: float) -> int:
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    return math.ceil(seq_len * (1.0 - ratio))


def sample_keep(batch: int, seq_len: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """(batch, K) increasing token indices, a uniform random subset per row."""
    k = kept_count(seq_len, ratio)
    if k == seq_len:
        return np.broadcast_to(np.arange(seq_len), (batch, seq_len)).copy()
    order = rng.random((batch, seq_len)).argsort(axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def mask_tokens(tokens: np.ndarray, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Drop a random ``ratio`` of the rows of (S, d) ``tokens``; returns (kept rows, kept indices)."""
    tokens = np.asarray(tokens)
    keep = sample_keep(1, tokens.shape[0], ratio, rng)[0]
    return tokens[keep], keep
