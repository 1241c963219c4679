"""Symmetric KL consistency loss between two augmented-branch posteriors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def kl_frame(target_logp, live_logp) -> ad.Value:
    """``KL(sg(p) || q)`` for log-probability rows ``target_logp`` and ``live_logp``.

    Works on single rows or on any stack of rows (summed over every axis). The
    target side is detached, so only ``live_logp`` receives gradient.
    """
    target = ad.stop_gradient(ad.as_value(target_logp))
    live = ad.as_value(live_logp)
    if target.shape != live.shape:
        raise ad.ShapeError(f"kl_frame: {target.shape} vs {live.shape}")
    weights = ad.Value(np.exp(target.data))
    return ad.sum_(weights * (target - live))


def cr_terms(p1: ad.Value, p2: ad.Value, frame_mask=None) -> ad.Value:
    """Per-utterance consistency loss for ``(B, T, V)`` branch log-posteriors.

    ``frame_mask`` (``B x T``, 1 for real frames) drops padding. Frames are summed,
    not averaged. Returns a ``(B,)`` Value.
    """
    if p1.shape != p2.shape:
        raise ad.ShapeError(f"cr_loss: branch shapes differ, {p1.shape} vs {p2.shape}")
    t1, t2 = ad.stop_gradient(p1), ad.stop_gradient(p2)
    w1, w2 = np.exp(t1.data), np.exp(t2.data)
    if frame_mask is not None:
        m = np.asarray(frame_mask, dtype=np.float64)[..., None]
        w1, w2 = w1 * m, w2 * m
    kl_12 = ad.sum_(ad.Value(w1) * (t1 - p2), axis=-1)
    kl_21 = ad.sum_(ad.Value(w2) * (t2 - p1), axis=-1)
    return ad.scale(ad.sum_(kl_12 + kl_21, axis=-1), 0.5)


def cr_loss(p1: ad.Value, p2: ad.Value) -> ad.Value:
    """``1/2 * sum_t [KL(sg(p1_t) || p2_t) + KL(sg(p2_t) || p1_t)]`` for ``T x V`` inputs."""
    if p1.ndim != 2:
        raise ad.ShapeError(f"cr_loss expects T x V posteriors, got {p1.shape}")
    return ad.reshape(cr_terms(ad.reshape(p1, (1,) + p1.shape), ad.reshape(p2, (1,) + p2.shape)), ())
