"""CTC negative log-likelihood via log-space forward-backward.

The loss is wired into the autodiff graph as a single node whose backward pass
uses the forward-backward symbol occupancy: for log-probabilities ``logp`` the
gradient of ``-log p(y|x)`` is ``-occupancy``; composed with ``log_softmax`` it
becomes the familiar ``softmax(logits) - occupancy``.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .alignlab import BLANK, Vocab, inverse_enumerate
from .kernels import NEG_INF, ctc_lattice

logger = logging.getLogger(__name__)

# Loss assigned to a target that cannot be reached in the available frames.
DEFAULT_LOSS_CAP = 1e4


def expand_target(labels) -> np.ndarray:
    """Interleave blanks: ``[y1, y2]`` -> ``[0, y1, 0, y2, 0]``."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(y == BLANK):
        raise ValueError("label sequence must not contain the blank id")
    ext = np.full(2 * y.size + 1, BLANK, dtype=np.int64)
    ext[1::2] = y
    return ext


def min_frames(labels) -> int:
    """Shortest alignment length that can collapse to ``labels``."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        return 1
    return int(y.size + np.count_nonzero(y[1:] == y[:-1]))


def forward_backward(logp, expanded):
    """``(alpha, beta, occupancy)`` lattices for one utterance.

    ``alpha`` and ``beta`` are ``T x (2|y|+1)`` log-space arrays; ``occupancy`` is
    ``T x |V|`` with rows summing to one whenever the target is reachable.
    """
    alpha, beta, _, occ = ctc_lattice(np.asarray(logp), np.asarray(expanded))
    return alpha, beta, occ


def ctc_log_likelihood(logp, labels) -> float:
    """``log sum_{a in B^-1(y)} prod_t p_t(a_t)``; ``-inf`` if no alignment exists."""
    logp = np.asarray(logp, dtype=np.float64)
    if logp.shape[0] < min_frames(labels):
        return NEG_INF
    return ctc_lattice(logp, expand_target(labels))[2]


def brute_force_log_likelihood(logp, labels) -> float:
    """Same quantity as :func:`ctc_log_likelihood`, by enumerating every alignment."""
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    paths = inverse_enumerate(labels, T, Vocab(V))
    if not paths:
        return NEG_INF
    frames = np.arange(T)
    scores = np.array([logp[frames, list(p)].sum() for p in paths])
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def ctc_nll(
    logp: ad.Value,
    targets: Sequence,
    lengths: Sequence[int] | None = None,
    cap: float = DEFAULT_LOSS_CAP,
) -> tuple[ad.Value, np.ndarray]:
    """Per-utterance CTC loss on normalised log-probabilities.

    Args:
        logp: ``(B, T, V)`` log-posteriors on the tape (or ``(T, V)`` for one utterance).
        targets: ``B`` label sequences.
        lengths: valid frame count per utterance; defaults to ``T``.
        cap: loss value used when a target is unreachable.

    Returns:
        ``(losses, flags)``: a ``(B,)`` Value of ``-log p(y|x)`` and a boolean array
        marking unreachable targets. Flagged entries carry ``cap`` and no gradient.
    """
    single = logp.ndim == 2
    data = logp.data[None] if single else logp.data
    B, T, _ = data.shape
    if single:
        targets = [targets]
    if len(targets) != B:
        raise ad.ShapeError(f"{len(targets)} targets for a batch of {B}")
    lengths = [T] * B if lengths is None else [int(n) for n in lengths]

    losses = np.empty(B)
    flags = np.zeros(B, dtype=bool)
    grad = np.zeros_like(data)
    for b in range(B):
        n = lengths[b]
        y = targets[b]
        if n < min_frames(y):
            losses[b] = cap
            flags[b] = True
            logger.debug("unreachable target: %d labels in %d frames", len(y), n)
            continue
        _, _, loglik, occ = ctc_lattice(data[b, :n], expand_target(y))
        if loglik == NEG_INF:
            losses[b] = cap
            flags[b] = True
            continue
        losses[b] = -loglik
        grad[b, :n] = -occ
    if single:
        losses, grad = losses[:1], grad[0]

    def backward(g):
        gb = g.reshape((-1,) + (1, 1))
        logp._accumulate(gb[0] * grad if single else gb * grad)

    out = ad._node(losses if not single else losses.reshape(()), (logp,), backward, "ctc_nll")
    return out, flags


def ctc_loss_and_grad(logits: ad.Value, labels, cap: float = DEFAULT_LOSS_CAP) -> ad.Value:
    """Scalar ``-log p(y|x)`` from unnormalised ``T x |V|`` logits.

    Gradient wrt ``logits`` is ``softmax(logits) - occupancy``. An unreachable
    target yields ``cap`` with zero gradient.
    """
    loss, flags = ctc_nll(ad.log_softmax(logits, axis=-1), labels, cap=cap)
    if flags.any():
        logger.info("ctc target unreachable in %d frames; loss capped at %g", logits.shape[0], cap)
    return loss
