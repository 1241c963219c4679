"""Time the CTC lattice kernel: numba vs the pure-numpy path.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Both kernels are called directly, so the environment flag is irrelevant here.
The first numba call (compilation) is excluded from the timings.
"""

import argparse
import time

import numpy as np

from aligncons import kernels
from aligncons.ctc import expand_target

# (pooled frames, vocab size incl. blank, label length)
SHAPES = [(10, 17, 3), (25, 17, 8), (60, 17, 20), (200, 32, 60)]


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if kernels.ctc_lattice_numba is None:
        raise SystemExit("numba is not available; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'T':>5} {'V':>4} {'|y|':>4} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for T, V, n in SHAPES:
        logp = np.log(rng.dirichlet(np.ones(V), size=T))
        ext = expand_target(rng.integers(1, V, size=n))
        ref = kernels.ctc_lattice_numpy(logp, ext)
        got = kernels.ctc_lattice_numba(logp, ext)  # compiles on first use
        diff = max(abs(ref[2] - got[2]), float(np.max(np.abs(ref[3] - got[3]))))
        t_np = best_of(lambda: kernels.ctc_lattice_numpy(logp, ext), args.repeats)
        t_nb = best_of(lambda: kernels.ctc_lattice_numba(logp, ext), args.repeats)
        print(f"{T:>5} {V:>4} {n:>4} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x {diff:>11.1e}")


if __name__ == "__main__":
    main()
