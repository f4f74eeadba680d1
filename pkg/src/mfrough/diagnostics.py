"""Tail diagnostics for the local accumulation ``N`` and the control ``w(0, T)``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rough_setup import DriverSpec, build_setup
from .variation import DEFAULT_Q, TimeGrid, build_control, local_accumulation_N, variation_table

MIN_SAMPLES = 64
MIN_COUNT = 10


@dataclass
class TailReport:
    kind: str
    n_samples: int
    levels: np.ndarray            # support points x
    survival: np.ndarray          # P(X >= x)
    counts: np.ndarray            # number of samples >= x
    log_linear_slope: float       # fit of log S against x
    weibull_shape: float          # fit of log(-log S) against log x
    decay_slopes: np.ndarray      # -diff(log S) / diff(x) over the observed range
    concave: bool                 # log-survival concave over the observed range
    monotone_decay: bool          # decay slopes nondecreasing
    degenerate: bool              # fewer than two observed levels
    reliable: bool
    flags: dict = field(default_factory=dict)


def _fit(x, y):
    if len(x) < 2:
        return np.nan
    return float(np.polyfit(x, y, 1)[0])


def tail_estimate(samples, kind="N", min_count=MIN_COUNT):
    """Empirical survival function and tail-shape fits.

    ``kind="N"`` checks the super-exponential direction (Weibull shape above
    1, concave log-survival); ``kind="w"`` checks the stretched-exponential
    direction (positive shape). The observed range is the set of levels reached
    by at least ``min_count`` samples. Reports are diagnostics, not proofs.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    levels = np.unique(x)
    counts = n - np.searchsorted(x, levels, side="left")
    keep = counts >= min_count
    lv, ct = levels[keep], counts[keep]
    S = ct / n
    logS = np.log(S)
    lin = _fit(lv, logS)
    pos = (lv > 0) & (S < 1)
    shape = _fit(np.log(lv[pos]), np.log(-logS[pos])) if pos.sum() >= 2 else np.nan
    decay = -np.diff(logS) / np.diff(lv) if lv.size >= 2 else np.zeros(0)
    monotone = bool(np.all(np.diff(decay) >= -1e-12)) if decay.size >= 2 else False
    if lv.size >= 3:
        concave = bool(np.all(np.diff(np.diff(logS) / np.diff(lv)) <= 1e-12))
    else:
        concave = False
    degenerate = lv.size < 2
    rep = TailReport(kind, n, lv, S, ct, lin, shape, decay, concave, monotone, degenerate,
                     reliable=n >= MIN_SAMPLES and not degenerate)
    if kind == "N":
        rep.flags["super_exponential"] = bool(np.isfinite(shape) and shape > 1.0 and concave)
    else:
        rep.flags["stretched_exponential"] = bool(np.isfinite(shape) and shape > 0.0)
    return rep


def accumulation_samples(spec, T, K, M, batches, alpha, p=None, q=DEFAULT_Q, max_partners=64,
                         seed_of_batch=None):
    """``N([0, T], omega, alpha)`` and ``w(0, T, omega)`` for every particle of every batch.

    Batch ``b`` samples a fresh ensemble with seed ``seed_of_batch(b)``
    (default ``spec.seed + b``).
    """
    grid = TimeGrid.uniform(T, K)
    Ns, ws = [], []
    for b in range(batches):
        seed = spec.seed + b if seed_of_batch is None else seed_of_batch(b)
        sb = DriverSpec(spec.kind, spec.dimension, seed, spec.hurst, spec.convention, spec.path,
                        spec.with_time)
        setup = build_setup(sb, grid, M, p=p, q=q, cross_mode="on-demand")
        w = build_control(setup, setup.p, q, max_partners=max_partners, seed=seed)
        for i in range(M):
            Ns.append(local_accumulation_N(w.values[i], (0, K), alpha))
        ws.append(w.values[:, 0, K])
    return np.asarray(Ns), np.concatenate(ws)


def random_superadditive(rng, n):
    """Random superadditive two-index function on ``n`` grid points (upper triangle).

    Mixture of p-variation tables (to the power p) of planar random walks,
    additive measures and powers >= 1 of additive measures; increments of the
    measures vanish with probability 0.3.
    """
    kind = rng.integers(3)
    if kind == 0:
        x = np.cumsum(rng.standard_normal((n, 2)), axis=0)
        norms = np.linalg.norm(x[None, :, :] - x[:, None, :], axis=2)
        return np.triu(variation_table(norms, rng.uniform(1.0, 3.0)), 1)
    inc = rng.exponential(size=n - 1) * (rng.random(n - 1) < 0.7)
    c = np.concatenate([[0.0], np.cumsum(inc)])
    gamma = 1.0 if kind == 1 else rng.uniform(1.0, 2.5)
    return np.triu(np.clip(c[None, :] - c[:, None], 0.0, None) ** gamma, 1)


@dataclass
class SplitBoundReport:
    pairs: int
    max_form_violations: int      # pairs with max(N1(a/2), N2(a/2)) < N(a)
    sum_form_violations: int      # pairs with N1(a/2) + N2(a/2) < N(a)
    first_violation: tuple = None


def accumulation_split_check(seed, pairs=100, n_range=(3, 14)):
    """Compare the accumulation of ``v1 + v2`` at ``alpha`` with those of each part at ``alpha / 2``."""
    rng = np.random.default_rng(seed)
    worst_max = worst_sum = 0
    first = None
    for _ in range(pairs):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        v1, v2 = random_superadditive(rng, n), random_superadditive(rng, n)
        total = v1 + v2
        alpha = float(rng.uniform(0.01, 1.0)) * max(total[0, -1], 1e-3)
        N = local_accumulation_N(total, (0, n - 1), alpha)
        N1 = local_accumulation_N(v1, (0, n - 1), alpha / 2)
        N2 = local_accumulation_N(v2, (0, n - 1), alpha / 2)
        if max(N1, N2) < N:
            worst_max += 1
            first = first or (n, alpha, N, N1, N2)
        worst_sum += N1 + N2 < N
    return SplitBoundReport(pairs, worst_max, int(worst_sum), first)
