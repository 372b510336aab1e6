"""Hot numeric kernels: numba-jitted with pure-NumPy fallbacks.

Two inner loops dominate pipeline runtime: the class-conditional
Mahalanobis scan (N samples x C classes x D^2) and the per-component
Gaussian log-densities of the mixture E-step (N x n x K^2). Both are
implemented twice, once with ``numba.njit`` and once in vectorized NumPy.

Which path the package uses is decided at import time: the jitted path
when numba imports cleanly, the NumPy path when it does not or when the
environment variable ``OODKIT_DISABLE_NUMBA`` is set to a non-empty
value. Both paths compute the same quantities; results can differ in the
last few ULPs because summation order differs, so tests compare them at
1e-12 rather than bitwise. Within one path, reductions run in a fixed
order and results are reproducible run to run.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.linalg import solve_triangular

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not os.environ.get("OODKIT_DISABLE_NUMBA", "")

_LOG_2PI = float(np.log(2.0 * np.pi))


def mahalanobis_best_numpy(x: np.ndarray, means: np.ndarray, precision: np.ndarray) -> np.ndarray:
    """max over classes of -(x - mu_c)^T P (x - mu_c), rowwise.

    x: (N, D) float64; means: (C, D); precision: (D, D) symmetric.
    Returns (N,). Materializes the full N x C quadratic-form table.
    """
    xp = x @ precision
    x_quad = np.einsum("ij,ij->i", xp, x)
    cross = xp @ means.T
    m_quad = np.einsum("ij,ij->i", means @ precision, means)
    quad = x_quad[:, None] - 2.0 * cross + m_quad[None, :]
    return -quad.min(axis=1)


def mixture_logpdfs_numpy(
    x: np.ndarray, means: np.ndarray, chols: np.ndarray, log_weights: np.ndarray
) -> np.ndarray:
    """log pi_k + log N(x; mu_k, Sigma_k) for every sample/component pair.

    x: (N, K); means: (n, K); chols: (n, K, K) lower Cholesky factors of
    the component covariances; log_weights: (n,). Returns (N, n).
    """
    n_samples, dim = x.shape
    n_comp = means.shape[0]
    out = np.empty((n_samples, n_comp))
    const = 0.5 * dim * _LOG_2PI
    for k in range(n_comp):
        lower = chols[k]
        logdet = np.sum(np.log(np.diag(lower)))
        z = solve_triangular(lower, (x - means[k]).T, lower=True)
        quad = np.einsum("ji,ji->i", z, z)
        out[:, k] = log_weights[k] - const - logdet - 0.5 * quad
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def mahalanobis_best_numba(x, means, precision):
        n, d = x.shape
        c = means.shape[0]
        xp = x @ precision
        cross = xp @ np.ascontiguousarray(means.T)
        mp = means @ precision
        m_quad = np.empty(c)
        for k in range(c):
            m_quad[k] = np.dot(mp[k], means[k])
        out = np.empty(n)
        for i in range(n):
            x_quad = 0.0
            for a in range(d):
                x_quad += xp[i, a] * x[i, a]
            best = np.inf
            for k in range(c):
                quad = x_quad - 2.0 * cross[i, k] + m_quad[k]
                if quad < best:
                    best = quad
            out[i] = -best
        return out

    @njit(cache=True)
    def mixture_logpdfs_numba(x, means, chols, log_weights):
        n_samples, dim = x.shape
        n_comp = means.shape[0]
        out = np.empty((n_samples, n_comp))
        const = 0.5 * dim * _LOG_2PI
        z = np.empty(dim)
        for k in range(n_comp):
            logdet = 0.0
            for a in range(dim):
                logdet += np.log(chols[k, a, a])
            head = log_weights[k] - const - logdet
            for i in range(n_samples):
                quad = 0.0
                for a in range(dim):
                    s = x[i, a] - means[k, a]
                    for b in range(a):
                        s -= chols[k, a, b] * z[b]
                    z[a] = s / chols[k, a, a]
                    quad += z[a] * z[a]
                out[i, k] = head - 0.5 * quad
        return out

else:  # pragma: no cover
    mahalanobis_best_numba = None
    mixture_logpdfs_numba = None


if USE_NUMBA:
    mahalanobis_best = mahalanobis_best_numba
    mixture_logpdfs = mixture_logpdfs_numba
else:
    mahalanobis_best = mahalanobis_best_numpy
    mixture_logpdfs = mixture_logpdfs_numpy
