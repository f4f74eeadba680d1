"""Slow, independent reference implementations used by the tests."""
import itertools

import numpy as np


def brute_force_pvar_power(norms_p, a, b):
    """max over every dissection of [a, b] of sum norms_p[t_k, t_{k+1}], summed left to right."""
    inner = list(range(a + 1, b))
    best = 0.0
    for r in range(len(inner) + 1):
        for pick in itertools.combinations(inner, r):
            pts = (a,) + pick + (b,)
            total = 0.0
            for s, t in zip(pts[:-1], pts[1:]):
                total = total + norms_p[s, t]
            best = max(best, total)
    return best


def iterated_integral_loop(x, y):
    """``int (x_r - x_0) (x) dy_r`` for piecewise-linear x, y given at common points, by quadrature.

    Each linear cell is integrated with Simpson's rule, exact for the
    quadratic integrand.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros((x.shape[1], y.shape[1]))
    for k in range(len(x) - 1):
        dy = y[k + 1] - y[k]
        left = x[k] - x[0]
        mid = 0.5 * (x[k] + x[k + 1]) - x[0]
        right = x[k + 1] - x[0]
        out += np.outer((left + 4 * mid + right) / 6.0, dy)
    return out


def greedy_accumulation(varpi, s, t, alpha):
    """Loop-by-loop replay of the greedy stopping times on grid indices."""
    times = [s]
    cur = s
    u = cur + 1
    while u <= t:
        if varpi[cur, u] >= alpha:
            times.append(u)
            cur = u
        u += 1
    return times


def max_disjoint_intervals(varpi, s, t, alpha):
    """Largest number of disjoint grid intervals in [s, t] with varpi >= alpha, by exhaustive DP."""
    best = [0] * (t + 1)
    for u in range(s + 1, t + 1):
        best[u] = best[u - 1]
        for a in range(s, u):
            if varpi[a, u] >= alpha:
                best[u] = max(best[u], best[a] + 1)
    return best[t]


def empirical_mean_var_se(x):
    """Mean, variance and their Monte Carlo standard errors."""
    x = np.asarray(x, dtype=float)
    n = x.size
    m = x.mean()
    v = x.var()
    m4 = np.mean((x - m) ** 4)
    return m, v, x.std() / np.sqrt(n), np.sqrt(max(m4 - v * v, 0.0) / n)


def em_scalar_mean_field(X0, W, t, substeps, seed, a=1.0, b=1.0):
    """Ito Euler-Maruyama for dX = X (a + b mean(X)) dW, equal weights, scalar.

    Each grid step of ``W`` (M, n) is refined by a Brownian bridge: ``substeps``
    Gaussian pieces, centred per step and shifted to reproduce the grid increment.
    """
    rng = np.random.default_rng(seed)
    x = np.array(X0, dtype=float).ravel()
    M, n = W.shape
    for k in range(n - 1):
        h = (t[k + 1] - t[k]) / substeps
        z = rng.standard_normal((M, substeps))
        inc = np.sqrt(h) * (z - z.mean(axis=1, keepdims=True)) + (W[:, k + 1] - W[:, k])[:, None] / substeps
        for j in range(substeps):
            x = x + x * (a + b * x.mean()) * inc[:, j]
    return x
