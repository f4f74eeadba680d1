"""Grid paths, p-variation, the controls v and w, and local accumulation.

All two-index objects are stored densely as ``(n, n, ...)`` arrays whose
upper triangle ``i <= j`` carries the values; the diagonal and the lower
triangle are zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import GridIndexError, InvalidParameterError

DEFAULT_Q = 8.0
WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidParameterError("a time grid needs at least 2 points")
        if pts[0] != 0.0:
            raise InvalidParameterError("a time grid must start at 0")
        if np.any(np.diff(pts) <= 0):
            raise InvalidParameterError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, T, K):
        """``K`` equal steps on ``[0, T]`` (``K + 1`` points)."""
        return cls(np.linspace(0.0, T, K + 1))

    @property
    def n(self):
        return self.points.size

    @property
    def T(self):
        return float(self.points[-1])

    def __len__(self):
        return self.n

    def subgrid(self, idx):
        return TimeGrid(self.points[np.asarray(idx)])


@dataclass
class GridPath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != self.grid.n:
            raise InvalidParameterError(
                f"path has {vals.shape[0]} values for a grid of {self.grid.n} points")
        self.values = vals

    def increments(self):
        return TwoIndexArray(self.grid, path_increments(self.values))


@dataclass
class TwoIndexArray:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        n = self.grid.n
        if vals.shape[:2] != (n, n):
            raise InvalidParameterError(f"expected leading shape ({n}, {n}), got {vals.shape[:2]}")
        self.values = vals

    def __getitem__(self, ij):
        i, j = ij
        if not 0 <= i <= j < self.grid.n:
            raise GridIndexError(f"pair ({i}, {j}) is not on the simplex of this grid")
        return self.values[i, j]

    def norms(self):
        return _norm_trailing(self.values, 2)


@dataclass
class Ensemble:
    """Weighted collection of per-member arrays stacked on axis 0."""

    members: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        self.weights = check_weights(self.weights, self.members.shape[0])

    def __len__(self):
        return self.members.shape[0]


def check_weights(weights, M):
    if weights is None:
        return np.full(M, 1.0 / M)
    w = np.asarray(weights, dtype=float)
    if w.shape != (M,):
        raise InvalidParameterError(f"expected {M} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise InvalidParameterError("weights must be nonnegative and sum to 1")
    return w


def path_increments(values):
    """``G[..., s, t, :] = x_t - x_s`` for values shaped ``(..., n, d)``, upper triangle only."""
    values = np.asarray(values, dtype=float)
    inc = values[..., None, :, :] - values[..., :, None, :]
    n = values.shape[-2]
    return inc * np.triu(np.ones((n, n)), 1)[..., None]


def _norm_trailing(a, lead):
    a = np.asarray(a, dtype=float)
    if a.ndim == lead:
        return np.abs(a)
    flat = a.reshape(a.shape[:lead] + (-1,))
    return np.sqrt(np.einsum("...k,...k->...", flat, flat))


def lq_norm(values, weights, q, axis=0):
    """Weighted empirical L^q norm ``(sum_i w_i |x_i|^q)^(1/q)`` along ``axis``."""
    x = np.moveaxis(np.abs(np.asarray(values, dtype=float)), axis, -1)
    return (x ** q @ np.asarray(weights, dtype=float)) ** (1.0 / q)


def _check_exponent(p, name="p"):
    if not p >= 1:
        raise InvalidParameterError(f"{name} must be >= 1, got {p}")


def _window(window, n):
    if window is None:
        return 0, n - 1
    a, b = window
    if not (0 <= a < n and 0 <= b < n) or a > b:
        raise GridIndexError(f"window ({a}, {b}) invalid for a grid of {n} points")
    return a, b


def _as_norm_matrix(g):
    if isinstance(g, GridPath):
        return _norm_trailing(path_increments(g.values), 2)
    if isinstance(g, TwoIndexArray):
        return g.norms()
    vals = np.asarray(g, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return _norm_trailing(path_increments(vals), 2)


def variation_table(norms, p):
    """All-window table of ``sup over dissections of sum |G|^p`` (not rooted).

    ``norms`` has shape ``(n, n)`` or ``(B, n, n)``.
    """
    _check_exponent(p)
    nrm = np.asarray(norms, dtype=float)
    single = nrm.ndim == 2
    dp = np.ascontiguousarray((nrm[None] if single else nrm) ** p)
    out = _kernels.dp_tables(dp)
    return out[0] if single else out


def p_variation(g, window=None, p=2.0):
    """p-variation of a path or two-index array over a grid window.

    ``g`` is a :class:`GridPath`, a :class:`TwoIndexArray`, or raw path values
    ``(n,)``/``(n, d)``. The supremum runs over all dissections made of grid
    points of the window and is computed exactly.
    """
    _check_exponent(p)
    nrm = _as_norm_matrix(g)
    a, b = _window(window, nrm.shape[0])
    total = _kernels.dp_window(np.ascontiguousarray(nrm ** p), a, b)
    return total ** (1.0 / p)


def brute_force_p_variation(g, p=2.0):
    """p-variation by enumerating every dissection (bitmask over interior points).

    Exponential cost; a reference for grids of at most 16 points.
    """
    _check_exponent(p)
    nrm = _as_norm_matrix(g) ** p
    n = nrm.shape[0]
    if n > 16:
        raise InvalidParameterError("exhaustive p-variation is limited to 16 grid points")
    best = 0.0
    for mask in range(1 << max(n - 2, 0)):
        prev, total = 0, 0.0
        for k in range(1, n - 1):
            if mask >> (k - 1) & 1:
                total = total + nrm[prev, k]
                prev = k
        best = max(best, total + nrm[prev, n - 1])
    return best ** (1.0 / p)


def lq_p_variation(e, window=None, p=2.0, q=DEFAULT_Q, weights=None, two_index=False):
    """p-variation with each increment replaced by its ensemble L^q norm.

    ``e`` stacks members on axis 0: paths ``(M, n[, d])`` or, with
    ``two_index=True``, two-index arrays ``(M, n, n, ...)``.
    """
    _check_exponent(p)
    _check_exponent(q, "q")
    arr = np.asarray(e.members if isinstance(e, Ensemble) else e, dtype=float)
    if isinstance(e, Ensemble) and weights is None:
        weights = e.weights
    M = arr.shape[0]
    weights = check_weights(weights, M)
    if two_index:
        nrm = _norm_trailing(arr, 3)
    else:
        if arr.ndim == 2:
            arr = arr[..., None]
        nrm = _norm_trailing(path_increments(arr), 3)
    moments = lq_norm(nrm, weights, q, axis=0)
    a, b = _window(window, moments.shape[0])
    total = _kernels.dp_window(np.ascontiguousarray(moments ** p), a, b)
    return total ** (1.0 / p)


@dataclass
class Control:
    """Per-particle two-index control on the grid window ``[lo, lo + n - 1]``.

    ``values[i, a, b]`` is the control of particle ``i`` on the pair
    ``(lo + a, lo + b)``.
    """

    values: np.ndarray
    lo: int = 0
    p: float = 2.5
    q: float = DEFAULT_Q

    @property
    def hi(self):
        return self.lo + self.values.shape[1] - 1

    def pair(self, a, b):
        """Control of every particle on the absolute grid pair ``(a, b)``."""
        if not self.lo <= a <= b <= self.hi:
            raise GridIndexError(f"pair ({a}, {b}) outside control window [{self.lo}, {self.hi}]")
        return self.values[:, a - self.lo, b - self.lo]

    def restrict(self, a, b):
        if not self.lo <= a <= b <= self.hi:
            raise GridIndexError(f"window ({a}, {b}) outside control window [{self.lo}, {self.hi}]")
        sl = slice(a - self.lo, b - self.lo + 1)
        return Control(self.values[:, sl, sl], a, self.p, self.q)


def control_v_terms(setup, p, q=DEFAULT_Q, window=None, max_partners=64, seed=0):
    """The six variation terms making up ``v``, each shaped like the control.

    Returns a dict keyed ``path``, ``path_lq``, ``diag``, ``cross_row``,
    ``cross_col``, ``cross_both``; the two ``*_lq``/``both`` terms are
    particle-independent and broadcast along axis 0.
    """
    if not 2 <= p < 3:
        raise InvalidParameterError(f"p must lie in [2, 3), got {p}")
    _check_exponent(q, "q")
    lo, hi = _window(window, setup.n)
    W = setup.level1[:, lo:hi + 1]
    weights = setup.weights

    path_norms = _norm_trailing(path_increments(W), 3)
    t_path = variation_table(path_norms, p)
    t_path_lq = variation_table(lq_norm(path_norms, weights, q), p)

    diag_norms = _norm_trailing(setup.diag_table(lo, hi), 3)
    t_diag = variation_table(diag_norms, p / 2)

    row, col = setup.cross_moment_tables(lo, hi, q, max_partners=max_partners, seed=seed)
    t_row = variation_table(row, p / 2)
    t_col = variation_table(col, p / 2)
    both = (weights @ row.reshape(row.shape[0], -1) ** q).reshape(row.shape[1:]) ** (1.0 / q)
    t_both = variation_table(both, p / 2)
    return {
        "path": t_path,
        "path_lq": t_path_lq[None],
        "diag": t_diag,
        "cross_row": t_row,
        "cross_col": t_col,
        "cross_both": t_both[None],
    }


def build_control_v(setup, p, q=DEFAULT_Q, window=None, max_partners=64, seed=0):
    """Control ``v(s, t, omega)`` for every particle and grid pair of ``window``.

    Sum of the p-variation (to the power p) of the particle's path, of the
    L^q-path, and the p/2-variations of the diagonal and of the three cross
    sections of the second level. Cross moments use at most ``max_partners``
    partners per particle (all of them when ``M <= max_partners``).
    """
    terms = control_v_terms(setup, p, q, window, max_partners, seed)
    v = sum(np.broadcast_to(t, terms["path"].shape) for t in terms.values())
    lo = _window(window, setup.n)[0]
    return Control(np.ascontiguousarray(v), lo, p, q)


def lq_one_variation(v, weights, q=DEFAULT_Q):
    """1-variation table of ``(s, t) -> <v(s, t, .)>_q``, exact over grid dissections."""
    moments = lq_norm(v.values, weights, q, axis=0)
    return variation_table(moments, 1.0)


def finest_lq_sum(v, weights, q=DEFAULT_Q):
    """Sum of ``<v>_q`` over consecutive grid steps, for every window."""
    moments = lq_norm(v.values, weights, q, axis=0)
    steps = np.concatenate([[0.0], np.cumsum(np.diagonal(moments, 1))])
    out = steps[None, :] - steps[:, None]
    return np.triu(out)


def build_control_w(v, q=None, weights=None):
    """``w = v + <v>_{q,1-var}``: superadditive and ``<w>_q <= 2 w`` by construction."""
    q = v.q if q is None else q
    weights = check_weights(weights, v.values.shape[0])
    one_var = lq_one_variation(v, weights, q)
    return Control(v.values + one_var[None], v.lo, v.p, q)


def build_control(setup, p, q=DEFAULT_Q, window=None, max_partners=64, seed=0):
    v = build_control_v(setup, p, q, window, max_partners, seed)
    return build_control_w(v, q, setup.weights)


def _varpi_matrix(varpi):
    if isinstance(varpi, TwoIndexArray):
        return varpi.values
    return np.asarray(varpi, dtype=float)


def accumulation_times(varpi, s, alpha, end=None):
    """Greedy stopping times ``tau_0 = s``, ``tau_{n+1}`` = first grid point with
    ``varpi(tau_n, u) >= alpha``. Stops at ``end`` (default: last grid point).
    """
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be > 0, got {alpha}")
    vp = _varpi_matrix(varpi)
    n = vp.shape[0]
    end = n - 1 if end is None else end
    if not 0 <= s <= end < n:
        raise GridIndexError(f"start {s} / end {end} invalid for {n} grid points")
    times = [s]
    cur = s
    while cur < end:
        hits = np.flatnonzero(vp[cur, cur + 1:end + 1] >= alpha)
        if hits.size == 0:
            break
        cur = cur + 1 + int(hits[0])
        times.append(cur)
    return times


def local_accumulation_N(varpi, window, alpha):
    s, t = window
    return len(accumulation_times(varpi, s, alpha, end=t)) - 1
