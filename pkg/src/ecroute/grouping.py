"""Re-view a batch of token sequences as fixed-size routing groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, concat, getitem, reshape


@dataclass(frozen=True)
class Grouping:
    batch: int
    seq_len: int
    group_size: int
    num_groups: int
    pad: int

    @property
    def valid(self) -> np.ndarray:
        """Boolean (num_groups, group_size) mask; False marks padding."""
        mask = np.ones(self.num_groups * self.group_size, dtype=bool)
        if self.pad:
            mask[-self.pad:] = False
        return mask.reshape(self.num_groups, self.group_size)


def regroup_tokens(x: Tensor, group_size: int) -> tuple[Tensor, Grouping]:
    """Flatten (B, S, d) into (num_groups, group_size, d), zero-padding the tail.

    Returns the grouped view and the :class:`Grouping` that undoes it.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"regroup_tokens: expected (B, S, d), got {x.shape}")
    if group_size < 1:
        raise ValueError(f"regroup_tokens: group_size must be positive, got {group_size}")
    b, s, d = x.shape
    n = b * s
    num_groups = -(-n // group_size)
    pad = num_groups * group_size - n
    flat = reshape(x, (n, d))
    if pad:
        flat = concat([flat, Tensor(np.zeros((pad, d)))], axis=0)
    info = Grouping(b, s, group_size, num_groups, pad)
    return reshape(flat, (num_groups, group_size, d)), info


def ungroup_tokens(y: Tensor, info: Grouping) -> Tensor:
    """Inverse of :func:`regroup_tokens`."""
    d = y.shape[-1]
    flat = reshape(y, (info.num_groups * info.group_size, d))
    if info.pad:
        flat = getitem(flat, slice(0, info.batch * info.seq_len))
    return reshape(flat, (info.batch, info.seq_len, d))
