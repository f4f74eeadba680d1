"""Compiled inner loops.

Every kernel parallelises over an outer batch axis only; each output cell is
written by exactly one iteration in a fixed order, so results do not depend
on the thread schedule.
"""
import numpy as np
from numba import config, njit, prange

# The bundled TBB is too old on some systems; prefer OpenMP unless the user chose.
if config.THREADING_LAYER == "default":
    config.THREADING_LAYER = "omp"


@njit(cache=True, parallel=True)
def dp_tables(dp):
    """Dissection suprema for every window of every batch member.

    ``dp[b, i, j]`` holds the (already powered) weight of the piece
    ``[t_i, t_j]``. Returns ``out[b, a, c] = max over dissections of [t_a, t_c]
    of the summed piece weights``.
    """
    B, n, _ = dp.shape
    out = np.zeros((B, n, n))
    for b in prange(B):
        for a in range(n):
            for c in range(a + 1, n):
                best = dp[b, a, c]
                for i in range(a + 1, c):
                    cand = out[b, a, i] + dp[b, i, c]
                    if cand > best:
                        best = cand
                out[b, a, c] = best
    return out


@njit(cache=True)
def dp_window(dp, a, c):
    """Single-window version of :func:`dp_tables`, O(n^2)."""
    if c <= a:
        return 0.0
    run = np.zeros(c - a + 1)
    for j in range(a + 1, c + 1):
        best = dp[a, j]
        for i in range(a + 1, j):
            cand = run[i - a] + dp[i, j]
            if cand > best:
                best = cand
        run[j - a] = best
    return run[c - a]


@njit(cache=True, parallel=True)
def cross_moments(W, nodes, partners, pweights, q, transpose):
    """Weighted L^q moments of the cross iterated integrals over all windows.

    ``W`` is the fine path ensemble (M, n_fine, m) and ``nodes`` the fine
    indices of the coarse points spanning the window. For particle ``i`` and
    its partners ``j`` the integral is ``int (W^i - W^i_s) (x) dW^j``
    (``transpose=False``) or ``int (W^j - W^j_s) (x) dW^i`` (``transpose=True``),
    evaluated exactly for the piecewise-linear interpolant.
    Returns (M, nw, nw) with the moment on the upper triangle.
    """
    M = W.shape[0]
    m = W.shape[2]
    nw = nodes.shape[0]
    P = partners.shape[1]
    half = 0.5 * q
    ihalf = int(half)
    integer = ihalf == half and ihalf >= 1
    out = np.zeros((M, nw, nw))
    for i in prange(M):
        acc = np.zeros((nw, nw))
        A = np.zeros((nw, m, m))
        for pi in range(P):
            j = np.int64(partners[i, pi])
            wj = pweights[i, pi]
            if transpose:
                a = j
                b = np.int64(i)
            else:
                a = np.int64(i)
                b = j
            for t in range(1, nw):
                for r in range(m):
                    for c in range(m):
                        A[t, r, c] = A[t - 1, r, c]
                for k in range(nodes[t - 1], nodes[t]):
                    for r in range(m):
                        mid = 0.5 * (W[a, k, r] + W[a, k + 1, r])
                        for c in range(m):
                            A[t, r, c] += mid * (W[b, k + 1, c] - W[b, k, c])
            for s in range(nw):
                ks = nodes[s]
                for t in range(s + 1, nw):
                    kt = nodes[t]
                    sq = 0.0
                    for r in range(m):
                        for c in range(m):
                            val = A[t, r, c] - A[s, r, c] - W[a, ks, r] * (W[b, kt, c] - W[b, ks, c])
                            sq += val * val
                    if integer:
                        pw = sq
                        for _ in range(ihalf - 1):
                            pw *= sq
                    else:
                        pw = sq ** half
                    acc[s, t] += wj * pw
        for s in range(nw):
            for t in range(s + 1, nw):
                out[i, s, t] = acc[s, t] ** (1.0 / q)
    return out
