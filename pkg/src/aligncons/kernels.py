"""CTC lattice kernels, numba-compiled with a pure-numpy fallback.

Set ``ALIGNCONS_DISABLE_NUMBA=1`` (or run without numba installed) to use the
numpy path. Both paths compute the same log-space recursions; results agree to
rounding.
"""

from __future__ import annotations

import os

import numpy as np

NEG_INF = -np.inf

_disabled = os.environ.get("ALIGNCONS_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _disabled:
        raise ImportError
    from numba import njit
except ImportError:  # pragma: no cover - depends on environment
    njit = None

BACKEND = "numpy" if njit is None else "numba"


def _skip_allowed(ext: np.ndarray, blank: int = 0) -> np.ndarray:
    """Positions reachable by skipping over a blank from ``s - 2``."""
    allowed = np.zeros(ext.shape[0], dtype=np.bool_)
    if ext.shape[0] > 2:
        allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


# -- numpy path -----------------------------------------------------------


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    finite = np.isfinite(m)
    safe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        total = np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))
    return np.where(finite, safe + total, NEG_INF)


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, NEG_INF)
    if k < v.shape[0]:
        out[k:] = v[:-k]
    return out


def _unshift(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, NEG_INF)
    if k < v.shape[0]:
        out[:-k] = v[k:]
    return out


def ctc_lattice_numpy(logp: np.ndarray, ext: np.ndarray):
    """Forward/backward lattices in log space.

    Returns ``(alpha, beta, loglik, occupancy)`` where ``alpha[t, s]`` includes the
    emission at ``t``, ``beta[t, s]`` excludes it, and ``occupancy[t, v]`` is the
    posterior probability that frame ``t`` emits symbol ``v``.
    """
    T, V = logp.shape
    L = ext.shape[0]
    skip = _skip_allowed(ext)
    emit = logp[:, ext]  # (T, L)

    alpha = np.full((T, L), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if L > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        from_skip = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _lse3(prev, _shift(prev, 1), from_skip) + emit[t]

    beta = np.full((T, L), NEG_INF)
    beta[T - 1, L - 1] = 0.0
    if L > 1:
        beta[T - 1, L - 2] = 0.0
    skip_next = np.zeros(L, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        from_skip = np.where(skip_next, _unshift(nxt, 2), NEG_INF)
        beta[t] = _lse3(nxt, _unshift(nxt, 1), from_skip)

    tail = alpha[T - 1, L - 2 :] if L > 1 else alpha[T - 1, :1]
    m = tail.max()
    loglik = NEG_INF if m == NEG_INF else float(m + np.log(np.exp(tail - m).sum()))

    occupancy = np.zeros((T, V))
    if loglik != NEG_INF:
        post = np.exp(alpha + beta - loglik)
        for s in range(L):
            occupancy[:, ext[s]] += post[:, s]
    return alpha, beta, loglik, occupancy


# -- numba path -------------------------------------------------------------

if njit is not None:

    @njit(cache=True)
    def _lse3_scalar(a, b, c):
        m = max(a, max(b, c))
        if m == -np.inf:
            return -np.inf
        return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))

    @njit(cache=True)
    def ctc_lattice_numba(logp, ext):
        T = logp.shape[0]
        V = logp.shape[1]
        L = ext.shape[0]
        skip = np.zeros(L, dtype=np.bool_)
        for s in range(2, L):
            skip[s] = ext[s] != 0 and ext[s] != ext[s - 2]

        alpha = np.full((T, L), -np.inf)
        alpha[0, 0] = logp[0, ext[0]]
        if L > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, T):
            for s in range(L):
                a1 = alpha[t - 1, s - 1] if s >= 1 else -np.inf
                a2 = alpha[t - 1, s - 2] if skip[s] else -np.inf
                alpha[t, s] = _lse3_scalar(alpha[t - 1, s], a1, a2) + logp[t, ext[s]]

        beta = np.full((T, L), -np.inf)
        beta[T - 1, L - 1] = 0.0
        if L > 1:
            beta[T - 1, L - 2] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(L):
                b0 = beta[t + 1, s] + logp[t + 1, ext[s]]
                b1 = beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]] if s + 1 < L else -np.inf
                b2 = beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]] if s + 2 < L and skip[s + 2] else -np.inf
                beta[t, s] = _lse3_scalar(b0, b1, b2)

        if L > 1:
            loglik = _lse3_scalar(alpha[T - 1, L - 1], alpha[T - 1, L - 2], -np.inf)
        else:
            loglik = alpha[T - 1, 0]

        occupancy = np.zeros((T, V))
        if loglik != -np.inf:
            for t in range(T):
                for s in range(L):
                    w = alpha[t, s] + beta[t, s]
                    if w != -np.inf:
                        occupancy[t, ext[s]] += np.exp(w - loglik)
        return alpha, beta, loglik, occupancy

else:
    ctc_lattice_numba = None


def ctc_lattice(logp: np.ndarray, ext: np.ndarray):
    """Dispatch to the active backend. See :func:`ctc_lattice_numpy`."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    ext = np.ascontiguousarray(ext, dtype=np.int64)
    if ctc_lattice_numba is not None:
        alpha, beta, loglik, occ = ctc_lattice_numba(logp, ext)
        return alpha, beta, float(loglik), occ
    return ctc_lattice_numpy(logp, ext)
