"""Boolean attention masks: allow[i, j] means query i may attend to key j."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def build_causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"causal mask needs n >= 1, got {n}")
    return np.tril(np.ones((n, n), dtype=bool))


def block_ids(block_sizes: Sequence[int]) -> np.ndarray:
    if len(block_sizes) == 0:
        raise ValueError("block-causal mask needs at least one block")
    if any(int(b) < 1 for b in block_sizes):
        raise ValueError(f"block sizes must be >= 1, got {list(block_sizes)}")
    return np.repeat(np.arange(len(block_sizes)), block_sizes)


def build_block_causal_mask(block_sizes: Sequence[int]) -> np.ndarray:
    """Full attention inside a block, causal across blocks."""
    b = block_ids(block_sizes)
    return b[None, :] <= b[:, None]


def segment_blocks(scales: Sequence[tuple[int, int]]) -> list[int]:
    return [int(h) * int(w) for h, w in scales]


def padded_causal_mask(key_valid: np.ndarray) -> np.ndarray:
    """(B, 1, L, L) causal mask that also hides padding keys; every query keeps itself."""
    b, n = key_valid.shape
    allow = build_causal_mask(n)[None] & key_valid[:, None, :]
    allow |= np.eye(n, dtype=bool)[None]
    return allow[:, None]
