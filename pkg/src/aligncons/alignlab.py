"""Alignment algebra: the CTC collapse map, its brute-force inverse, greedy decoding."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

BLANK = 0

# Brute-force enumeration visits |V|**T paths; refuse anything bigger.
MAX_ENUM_FRAMES = 6
MAX_ENUM_VOCAB = 4


@dataclass(frozen=True)
class Vocab:
    """Token ids ``0 .. size-1``; id 0 is the blank."""

    size: int
    blank_id: int = BLANK

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab needs at least 2 symbols (blank + 1), got {self.size}")
        if self.blank_id != BLANK:
            raise ValueError("blank_id is fixed at 0")

    @property
    def tokens(self) -> range:
        return range(self.size)


def collapse(alignment, blank: int = BLANK) -> np.ndarray:
    """Merge repeated tokens, then drop blanks.

    >>> collapse([1, 1, 0, 1, 0]).tolist()
    [1, 1]
    """
    a = np.asarray(alignment, dtype=np.int64).reshape(-1)
    if a.size == 0:
        return a
    keep = np.ones(a.size, dtype=bool)
    keep[1:] = a[1:] != a[:-1]
    merged = a[keep]
    return merged[merged != blank]


def inverse_enumerate(labels, T: int, vocab: Vocab) -> set[tuple[int, ...]]:
    """Every length-``T`` alignment over ``vocab`` that collapses to ``labels``.

    Exhaustive search over ``vocab.size ** T`` paths; used as a test oracle only.
    """
    if T > MAX_ENUM_FRAMES or vocab.size > MAX_ENUM_VOCAB:
        raise ValueError(
            f"enumeration refused: T={T} (max {MAX_ENUM_FRAMES}), |V|={vocab.size} (max {MAX_ENUM_VOCAB})"
        )
    target = tuple(int(v) for v in labels)
    return {path for path in itertools.product(vocab.tokens, repeat=T) if tuple(collapse(path).tolist()) == target}


def greedy_decode(logp) -> np.ndarray:
    """Per-frame argmax over the last axis. Ties go to the smallest token id."""
    logp = np.asarray(logp)
    if logp.ndim < 1 or logp.shape[0] == 0:
        raise ValueError("greedy_decode needs at least one frame")
    return np.argmax(logp, axis=-1).astype(np.int64)
