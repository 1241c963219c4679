"""SpecAugment-style time/feature masking for the two consistency branches."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    """Mask counts and maximum widths.

    A ``max_*_len`` below 1 is read as a fraction of the corresponding axis
    (``0.1`` -> 10% of the frames); 1 or above is an absolute count.
    """

    num_time_masks: int = 2
    max_time_mask_len: float = 0.1
    num_feat_masks: int = 2
    max_feat_mask_len: float = 0.25
    mask_value: float = 0.0

    def __post_init__(self):
        if self.num_time_masks < 0 or self.num_feat_masks < 0:
            raise ValueError("mask counts must be >= 0")
        if self.max_time_mask_len < 0 or self.max_feat_mask_len < 0:
            raise ValueError("mask lengths must be >= 0")

    def time_width(self, n_frames: int) -> int:
        return _resolve(self.max_time_mask_len, n_frames)

    def feat_width(self, n_feats: int) -> int:
        return _resolve(self.max_feat_mask_len, n_feats)


def _resolve(width: float, n: int) -> int:
    w = int(np.floor(width * n)) if width < 1 else int(width)
    return min(w, n)


def apply_time_mask(x: np.ndarray, start: int, length: int, value: float = 0.0) -> np.ndarray:
    """Copy of ``x`` with frames ``[start, start+length)`` set to ``value``."""
    if start < 0 or length < 0 or start + length > x.shape[0]:
        raise IndexError(f"time mask [{start}, {start + length}) outside {x.shape[0]} frames")
    out = x.copy()
    out[start : start + length, :] = value
    return out


def apply_feat_mask(x: np.ndarray, start: int, length: int, value: float = 0.0) -> np.ndarray:
    """Copy of ``x`` with feature bins ``[start, start+length)`` set to ``value``."""
    if start < 0 or length < 0 or start + length > x.shape[1]:
        raise IndexError(f"feature mask [{start}, {start + length}) outside {x.shape[1]} bins")
    out = x.copy()
    out[:, start : start + length] = value
    return out


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    T, F = x.shape
    out = x
    tw, fw = policy.time_width(T), policy.feat_width(F)
    for _ in range(policy.num_time_masks):
        n = int(rng.integers(0, tw + 1))
        out = apply_time_mask(out, int(rng.integers(0, T - n + 1)), n, policy.mask_value)
    for _ in range(policy.num_feat_masks):
        n = int(rng.integers(0, fw + 1))
        out = apply_feat_mask(out, int(rng.integers(0, F - n + 1)), n, policy.mask_value)
    return out if out is not x else x.copy()


def branch_rng(seed: int, epoch: int, utt_id: str, branch: int) -> np.random.Generator:
    """Stream keyed on (seed, epoch, utterance id, branch); independent of batch order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(utt_id.encode()), branch])


def augment_pair(x: np.ndarray, policy: AugmentPolicy, rng_state) -> tuple[np.ndarray, np.ndarray]:
    """Two independently masked copies of ``x``; ``x`` itself is untouched.

    ``rng_state`` is a ``(seed, epoch, utt_id)`` key or an integer seed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot augment an empty feature matrix")
    if isinstance(rng_state, tuple):
        seed, epoch, utt_id = rng_state
        rngs = [branch_rng(seed, epoch, utt_id, b) for b in (1, 2)]
    else:
        rngs = [np.random.default_rng([int(rng_state), b]) for b in (1, 2)]
    return augment(x, policy, rngs[0]), augment(x, policy, rngs[1])
