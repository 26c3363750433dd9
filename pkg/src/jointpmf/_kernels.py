"""Fused single-pass sweep kernel for the coordinate-ascent fit loop.

One call performs, per sample column: the expected-log gather, the ELBO
data and entropy contributions of the incoming responsibilities, the
softmax producing the next responsibilities, and the accumulation of the
next global sufficient statistics.  This is a sequential, single-threaded
loop, so results are bit-reproducible; it exists purely to avoid the
memory traffic of materializing each of those steps separately.

The numpy implementations in ``vb`` remain the reference semantics; a test
asserts both paths agree.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def _fused_sweep_py(y, log_loading, log_factors_flat, offsets, rho_t,
                    sum_loading, scatter_flat):
    n_vars, t_count = y.shape
    rank = log_loading.shape[0]
    lg = np.empty(rank)
    data_term = 0.0
    entropy = 0.0
    for t in range(t_count):
        for r in range(rank):
            lg[r] = log_loading[r]
        for n in range(n_vars):
            c = y[n, t]
            if c > 0:
                row = offsets[n] + c - 1
                for r in range(rank):
                    lg[r] += log_factors_flat[row, r]
        m = lg[0]
        for r in range(1, rank):
            if lg[r] > m:
                m = lg[r]
        total = 0.0
        for r in range(rank):
            p_old = rho_t[t, r]
            data_term += p_old * lg[r]
            if p_old > 0.0:
                entropy -= p_old * math.log(p_old)
            e = math.exp(lg[r] - m)
            lg[r] = e
            total += e
        for r in range(rank):
            p_new = lg[r] / total
            rho_t[t, r] = p_new
            sum_loading[r] += p_new
        for n in range(n_vars):
            c = y[n, t]
            if c > 0:
                row = offsets[n] + c - 1
                for r in range(rank):
                    scatter_flat[row, r] += rho_t[t, r]
    return data_term, entropy


if HAVE_NUMBA:
    _fused_sweep = numba.njit(cache=True, fastmath=False)(_fused_sweep_py)
else:  # pragma: no cover
    _fused_sweep = _fused_sweep_py


def fused_sweep(y, log_loading, log_factors_flat, offsets, rho_t):
    """Run one fused sweep pass; mutates ``rho_t`` (samples-major) in place.

    Returns (sum_loading, scatter_flat, data_term, entropy) where the sums
    are over the NEW responsibilities and the data/entropy terms use the
    incoming ones (all-zero incoming responsibilities contribute nothing,
    which the initialization pass relies on).
    """
    rank = log_loading.shape[0]
    sum_loading = np.zeros(rank)
    scatter_flat = np.zeros((log_factors_flat.shape[0], rank))
    data_term, entropy = _fused_sweep(
        y, log_loading, log_factors_flat, offsets, rho_t, sum_loading, scatter_flat
    )
    return sum_loading, scatter_flat, data_term, entropy
