"""Time the numba kernels against their pure-NumPy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]

Covers the two hot loops: the class-conditional Mahalanobis scan and the
mixture E-step log-densities. The JIT path is compiled (and warmed) before
timing. Representative shapes range from demo-sized to drop-in sizes for
large feature dumps.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from oodkit import _accel

MAHALANOBIS_SHAPES = [
    # (n_samples, n_classes, feature_dim)
    (2_000, 5, 16),
    (20_000, 10, 64),
    (5_000, 100, 64),
    (50_000, 20, 32),
]

MIXTURE_SHAPES = [
    # (n_samples, n_components, score_dim)
    (5_000, 5, 5),
    (50_000, 10, 8),
    (200_000, 10, 5),
    (20_000, 20, 8),
]


def _time(fn, *args, repeats):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_mahalanobis(repeats):
    print("mahalanobis_best: max_c of -(x-mu_c)^T P (x-mu_c)")
    print(f"{'shape (N, C, D)':>22} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for n, c, d in MAHALANOBIS_SHAPES:
        x = rng.normal(size=(n, d))
        means = rng.normal(size=(c, d))
        a = rng.normal(size=(d, d))
        precision = a @ a.T + d * np.eye(d)
        _accel.mahalanobis_best_numba(x[:10], means, precision)  # warm the JIT
        t_np = _time(_accel.mahalanobis_best_numpy, x, means, precision, repeats=repeats)
        t_nb = _time(_accel.mahalanobis_best_numba, x, means, precision, repeats=repeats)
        print(f"{str((n, c, d)):>22} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.2f}x")


def bench_mixture(repeats):
    print()
    print("mixture_logpdfs: per-component Gaussian log-densities (E-step)")
    print(f"{'shape (N, n, K)':>22} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    rng = np.random.default_rng(1)
    for n, m, k in MIXTURE_SHAPES:
        x = rng.normal(size=(n, k))
        means = rng.normal(size=(m, k))
        covs = np.stack([np.eye(k) + 0.3 * np.outer(v, v) for v in rng.normal(size=(m, k))])
        chols = np.linalg.cholesky(covs)
        log_w = np.log(rng.dirichlet(np.ones(m)))
        _accel.mixture_logpdfs_numba(x[:10], means, chols, log_w)  # warm the JIT
        t_np = _time(_accel.mixture_logpdfs_numpy, x, means, chols, log_w, repeats=repeats)
        t_nb = _time(_accel.mixture_logpdfs_numba, x, means, chols, log_w, repeats=repeats)
        print(f"{str((n, m, k)):>22} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats (best wins)")
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    bench_mahalanobis(args.repeats)
    bench_mixture(args.repeats)


if __name__ == "__main__":
    main()
