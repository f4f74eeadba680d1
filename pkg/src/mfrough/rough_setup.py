"""Gaussian drivers and their piecewise-linear rough set-up over a particle ensemble.

The second level of every set-up is the exact iterated integral of the
piecewise-linear interpolation of the sampled paths. This makes it geometric
and Chen-exact on the grid; an Ito bracket correction can be subtracted from
the diagonal level of Brownian components.

Index convention for the cross level: ``cross[j, i]`` is
``int (W^j_r - W^j_s) (x) dW^i_r``, the first particle being the integrand.
The self pair ``cross[i, i]`` equals the diagonal level of particle ``i``
under the set-up's convention.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import lapack

from . import _kernels
from .errors import (
    ConfigError,
    FactorizationError,
    GridIndexError,
    InvalidParameterError,
    MemoryBudgetError,
)
from .variation import DEFAULT_Q, TimeGrid, _norm_trailing, check_weights

KINDS = ("brownian", "fbm", "deterministic")
CONVENTIONS = ("stratonovich-linear", "ito-correction")
CROSS_MODES = ("materialize-steps", "on-demand")
DEFAULT_MEMORY_BUDGET = 1 << 30


@dataclass
class DriverSpec:
    kind: str = "brownian"
    dimension: int = 1
    seed: int = 0
    hurst: float = 0.5
    convention: str = "stratonovich-linear"
    path: Optional[np.ndarray] = None
    with_time: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown driver kind {self.kind!r}")
        if self.convention not in CONVENTIONS:
            raise InvalidParameterError(f"unknown second-level convention {self.convention!r}")
        if self.dimension < 1:
            raise InvalidParameterError("driver dimension must be >= 1")
        if self.kind == "fbm" and not 1 / 3 < self.hurst <= 1:
            raise InvalidParameterError(f"fbm needs H in (1/3, 1], got {self.hurst}")
        if self.convention == "ito-correction" and self.kind != "brownian":
            raise ConfigError("the Ito bracket correction only applies to Brownian drivers")
        if self.kind == "deterministic":
            if self.path is None:
                raise ConfigError("deterministic driver needs a path table")
            path = np.asarray(self.path, dtype=float)
            if path.ndim == 1:
                path = path[:, None]
            if path.shape[1] != self.dimension:
                raise ConfigError(f"path table has {path.shape[1]} columns, dimension is {self.dimension}")
            self.path = path

    @property
    def rho(self):
        """Covariance variation exponent ``1 / (2H)`` (1 for Brownian)."""
        return 1.0 / (2.0 * self.hurst) if self.kind == "fbm" else 1.0

    def default_p(self):
        if self.kind == "fbm":
            return 0.5 * (2.0 * self.rho + 3.0)
        return 2.5

    def covariance(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "brownian":
            return np.minimum(s, t)
        if self.kind == "fbm":
            h2 = 2.0 * self.hurst
            return 0.5 * (s ** h2 + t ** h2 - np.abs(t - s) ** h2)
        return np.zeros(np.broadcast(s, t).shape)


def particle_rng(seed, index):
    """Counter-style stream for one particle, independent of how many are drawn."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _standard_normals(seed, M, shape):
    out = np.empty((M,) + shape)
    for i in range(M):
        out[i] = particle_rng(seed, i).standard_normal(shape)
    return out


@functools.lru_cache(maxsize=32)
def _fbm_factor(times, hurst):
    t = np.asarray(times)
    h2 = 2.0 * hurst
    cov = 0.5 * (t[:, None] ** h2 + t[None, :] ** h2 - np.abs(t[:, None] - t[None, :]) ** h2)
    chol, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info == 0:
        return chol
    if info < 0:
        raise FactorizationError(f"dpotrf argument error {info}")
    # Cholesky fails on rank-deficient but PSD covariances (H = 1): use a spectral root.
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-10 * max(evals.max(), 1.0):
        raise FactorizationError(
            f"fbm covariance is not positive semidefinite; Cholesky failed at pivot {info - 1} "
            f"(t = {t[info - 1]:.6g}), smallest eigenvalue {evals.min():.3e}",
            pivot=info - 1,
        )
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def sample_gaussian_driver(spec, grid, M):
    """``M`` independent driver paths on ``grid``, shape ``(M, n, m)``, all starting at 0."""
    if M < 1:
        raise InvalidParameterError("need at least one particle")
    n, m = grid.n, spec.dimension
    if spec.kind == "deterministic":
        if spec.path.shape[0] != n:
            raise ConfigError(f"path table has {spec.path.shape[0]} rows for {n} grid points")
        return np.broadcast_to(spec.path, (M, n, m)).copy()
    z = _standard_normals(spec.seed, M, (n - 1, m))
    out = np.zeros((M, n, m))
    if spec.kind == "brownian":
        out[:, 1:] = np.cumsum(z * np.sqrt(np.diff(grid.points))[None, :, None], axis=1)
    else:
        factor = _fbm_factor(tuple(grid.points[1:]), float(spec.hurst))
        out[:, 1:] = np.einsum("ab,ibk->iak", factor, z)
    return out


def lift_piecewise_linear(paths, pair, window):
    """Iterated integral ``int_s^t (W^i_r - W^i_s) (x) dW^j_r`` of the interpolants.

    Direct cell-by-cell sum; ``paths`` is ``(M, n, m)``.
    """
    W = np.asarray(paths, dtype=float)
    i, j = pair
    s, t = window
    if not 0 <= s <= t < W.shape[1]:
        raise GridIndexError(f"window ({s}, {t}) invalid")
    m = W.shape[2]
    out = np.zeros((m, m))
    for k in range(s, t):
        di = W[i, k + 1] - W[i, k]
        dj = W[j, k + 1] - W[j, k]
        out += np.outer(W[i, k] - W[i, s], dj) + 0.5 * np.outer(di, dj)
    return out


def _pair_sum(A, B):
    """``out[j, i, r, s] = sum_k A[j, k, r] B[i, k, s]`` through one matrix product."""
    J, K, m = A.shape
    I = B.shape[0]
    a = A.transpose(0, 2, 1).reshape(J * m, K)
    b = B.transpose(1, 0, 2).reshape(K, I * B.shape[2])
    return (a @ b).reshape(J, m, I, B.shape[2]).transpose(0, 2, 1, 3)


@dataclass
class RoughSetup:
    """Particle ensemble ``W^i`` with diagonal and cross second levels.

    ``fine`` holds the sampled paths; ``nodes`` selects the grid points the
    set-up exposes (every fine point unless coarsened). Second-level values on
    node pairs are always the iterated integrals of the fine interpolants.
    """

    grid: TimeGrid
    fine: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    ito_mask: np.ndarray
    brownian_mask: np.ndarray
    p: float = 2.5
    q: float = DEFAULT_Q
    cross_mode: str = "on-demand"
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    fine_times: np.ndarray = None
    _steps: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.cross_mode not in CROSS_MODES:
            raise InvalidParameterError(f"unknown cross mode {self.cross_mode!r}")
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.weights = check_weights(self.weights, self.fine.shape[0])
        if self.fine_times is None:
            self.fine_times = self.grid.points
        mid = 0.5 * (self.fine[:, 1:] + self.fine[:, :-1])
        dW = np.diff(self.fine, axis=1)
        prefix = np.zeros(self.fine.shape[:2] + (self.m, self.m))
        prefix[:, 1:] = np.cumsum(np.einsum("ikr,iks->ikrs", mid, dW), axis=1)
        self._diag_prefix = prefix
        if self.cross_mode == "materialize-steps":
            need = self.step_table_bytes()
            if need > self.memory_budget:
                raise MemoryBudgetError(
                    f"materialized cross steps need {need} bytes, budget is {self.memory_budget}",
                    required_bytes=need,
                )
            self._steps = np.stack([self.cross_pair(k, k + 1) for k in range(self.n - 1)])

    @property
    def M(self):
        return self.fine.shape[0]

    @property
    def m(self):
        return self.fine.shape[2]

    @property
    def n(self):
        return self.nodes.size

    @property
    def level1(self):
        return self.fine[:, self.nodes]

    def step_table_bytes(self):
        return (self.n - 1) * self.M ** 2 * self.m ** 2 * 8

    def _check_pair(self, a, b):
        if not 0 <= a <= b < self.n:
            raise GridIndexError(f"pair ({a}, {b}) invalid for {self.n} grid points")

    def _ito_term(self, dt):
        return 0.5 * np.asarray(dt)[..., None, None] * np.diag(self.ito_mask)

    def diag(self, a, b):
        """Diagonal second level of every particle on the node pair ``(a, b)``: (M, m, m)."""
        self._check_pair(a, b)
        fa, fb = self.nodes[a], self.nodes[b]
        W = self.fine
        out = (self._diag_prefix[:, fb] - self._diag_prefix[:, fa]
               - np.einsum("ir,is->irs", W[:, fa], W[:, fb] - W[:, fa]))
        return out - self._ito_term(self.grid.points[b] - self.grid.points[a])

    def diag_step(self, k):
        return self.diag(k, k + 1)

    def diag_table(self, lo=0, hi=None):
        """Diagonal level on every pair of the window: (M, nw, nw, m, m), upper triangle."""
        hi = self.n - 1 if hi is None else hi
        self._check_pair(lo, hi)
        idx = self.nodes[lo:hi + 1]
        A = self._diag_prefix[:, idx]
        W = self.fine[:, idx]
        out = A[:, None, :] - A[:, :, None] - np.einsum(
            "isr,istu->istru", W, W[:, None, :, :] - W[:, :, None, :])
        t = self.grid.points[lo:hi + 1]
        out = out - self._ito_term(t[None, :] - t[:, None])[None]
        mask = np.triu(np.ones((idx.size, idx.size)), 1)
        return out * mask[None, :, :, None, None]

    def cross_pair(self, a, b, rows=None, cols=None):
        """Cross level on a node pair: ``out[j, i] = int (W^j - W^j_a) (x) dW^i``."""
        self._check_pair(a, b)
        fa, fb = self.nodes[a], self.nodes[b]
        W = self.fine
        Wr = W if rows is None else W[rows]
        Wc = W if cols is None else W[cols]
        integrand = Wr[:, fa:fb] - Wr[:, fa:fa + 1] + 0.5 * np.diff(Wr[:, fa:fb + 1], axis=1)
        dW = np.diff(Wc[:, fa:fb + 1], axis=1)
        out = _pair_sum(integrand, dW)
        self._ito_self(out, rows, cols, self.grid.points[b] - self.grid.points[a])
        return out

    def cross_factors(self, a, b, rows=None):
        """Cell factors of the cross level on a node pair.

        ``cross[J, i] = sum_c A[J, c] (x) dW[i, c]`` up to the Ito bracket of
        the self pair; ``A`` is (M, cells, m) and ``dW`` is (R, cells, m).
        """
        self._check_pair(a, b)
        fa, fb = self.nodes[a], self.nodes[b]
        W = self.fine
        A = W[:, fa:fb] - W[:, fa:fa + 1] + 0.5 * np.diff(W[:, fa:fb + 1], axis=1)
        Wc = W if rows is None else W[rows]
        return A, np.diff(Wc[:, fa:fb + 1], axis=1)

    def _ito_self(self, out, rows, cols, dt):
        """A particle paired with itself carries its own diagonal level, bracket included."""
        if not self.ito_mask.any():
            return
        if rows is None and cols is None:
            jj = ii = np.arange(self.M)
        else:
            r = np.arange(self.M) if rows is None else np.asarray(rows)
            c = np.arange(self.M) if cols is None else np.asarray(cols)
            _, jj, ii = np.intersect1d(r, c, assume_unique=True, return_indices=True)
        if jj.size:
            out[jj, ii] -= self._ito_term(dt)

    def cross_step(self, k):
        if self._steps is not None:
            return self._steps[k]
        return self.cross_pair(k, k + 1)

    def cross_table(self, rows=None, cols=None, lo=0, hi=None):
        """Cross level on every pair of the window, cell by cell from each left point.

        Shape ``(R, C, nw, nw, m, m)``; built independently of the prefix
        formulas so that it can be used to audit Chen's relations.
        """
        hi = self.n - 1 if hi is None else hi
        self._check_pair(lo, hi)
        nw = hi - lo + 1
        R = self.M if rows is None else len(rows)
        C = self.M if cols is None else len(cols)
        out = np.zeros((R, C, nw, nw, self.m, self.m))
        for s in range(nw):
            acc = np.zeros((R, C, self.m, self.m))
            for t in range(s + 1, nw):
                # every piece is measured from the fixed left point lo + s
                a, b = lo + s, lo + t
                W = self.fine
                Wr = W if rows is None else W[rows]
                Wc = W if cols is None else W[cols]
                fa, f0, f1 = self.nodes[a], self.nodes[b - 1], self.nodes[b]
                integrand = Wr[:, f0:f1] - Wr[:, fa:fa + 1] + 0.5 * np.diff(Wr[:, f0:f1 + 1], axis=1)
                dW = np.diff(Wc[:, f0:f1 + 1], axis=1)
                acc = acc + _pair_sum(integrand, dW)
                out[:, :, s, t] = acc
                self._ito_self(out[:, :, s, t], rows, cols,
                               self.grid.points[b] - self.grid.points[a])
        return out

    def partners(self, max_partners, seed=0):
        """Partner indices and renormalised weights used for cross moments."""
        M = self.M
        if M <= max_partners:
            idx = np.broadcast_to(np.arange(M), (M, M)).copy()
            return idx, np.broadcast_to(self.weights, (M, M)).copy()
        idx = np.empty((M, max_partners), dtype=np.int64)
        for i in range(M):
            idx[i] = np.sort(particle_rng(seed, i).choice(M, size=max_partners, replace=False))
        pw = self.weights[idx]
        return idx, pw / pw.sum(axis=1, keepdims=True)

    def cross_moment_tables(self, lo, hi, q, max_partners=64, seed=0):
        """Per-particle L^q moments of ``W^perp(omega, .)`` and ``W^perp(., omega)`` on all window pairs."""
        idx, pw = self.partners(max_partners, seed)
        nodes = np.ascontiguousarray(self.nodes[lo:hi + 1])
        fine = np.ascontiguousarray(self.fine)
        row = _kernels.cross_moments(fine, nodes, idx, pw, float(q), False)
        col = _kernels.cross_moments(fine, nodes, idx, pw, float(q), True)
        return row, col

    def coarsen(self, factor):
        """Set-up on every ``factor``-th grid point, keeping the fine iterated integrals."""
        if (self.n - 1) % factor:
            raise GridIndexError(f"{self.n - 1} steps are not divisible by {factor}")
        mode = self.cross_mode
        if mode == "materialize-steps" and ((self.n - 1) // factor) * self.M ** 2 * self.m ** 2 * 8 > self.memory_budget:
            mode = "on-demand"
        return RoughSetup(
            grid=self.grid.subgrid(np.arange(0, self.n, factor)),
            fine=self.fine,
            nodes=self.nodes[::factor],
            weights=self.weights,
            ito_mask=self.ito_mask,
            brownian_mask=self.brownian_mask,
            p=self.p,
            q=self.q,
            cross_mode=mode,
            memory_budget=self.memory_budget,
            fine_times=self.fine_times,
        )

    def permuted(self, perm):
        """Same set-up with particles relabelled by ``perm``."""
        w = self.weights[perm]
        return RoughSetup(self.grid, self.fine[perm], self.nodes, w / w.sum(), self.ito_mask,
                          self.brownian_mask, self.p, self.q, self.cross_mode, self.memory_budget,
                          self.fine_times)


def build_setup(spec, grid, M, p=None, q=DEFAULT_Q, cross_mode="materialize-steps",
                memory_budget=DEFAULT_MEMORY_BUDGET, weights=None):
    """Sample ``M`` drivers and assemble their rough set-up.

    With ``spec.with_time`` a deterministic time coordinate is appended to the
    driver as its last component (how drift terms are carried).
    """
    if cross_mode not in CROSS_MODES:
        raise InvalidParameterError(f"unknown cross mode {cross_mode!r}")
    p = spec.default_p() if p is None else float(p)
    if not 2 <= p < 3:
        raise InvalidParameterError(f"p must lie in [2, 3), got {p}")
    if spec.kind == "fbm" and not p > 2 * spec.rho:
        raise InvalidParameterError(f"fbm with H={spec.hurst} needs p > {2 * spec.rho}")
    W = sample_gaussian_driver(spec, grid, M)
    brownian = np.full(spec.dimension, spec.kind == "brownian", dtype=float)
    if spec.with_time:
        W = np.concatenate([W, np.broadcast_to(grid.points[None, :, None], (M, grid.n, 1))], axis=2)
        brownian = np.append(brownian, 0.0)
    ito = brownian if spec.convention == "ito-correction" else np.zeros_like(brownian)
    return RoughSetup(grid=grid, fine=W, nodes=np.arange(grid.n), weights=weights,
                      ito_mask=ito, brownian_mask=brownian, p=p, q=q,
                      cross_mode=cross_mode, memory_budget=memory_budget)


def setup_from_paths(paths, grid, p=2.5, q=DEFAULT_Q, weights=None, ito_mask=None,
                     brownian_mask=None, cross_mode="on-demand"):
    """Set-up over user-supplied driver paths ``(M, n, m)``."""
    W = np.asarray(paths, dtype=float)
    if W.ndim == 2:
        W = W[..., None]
    m = W.shape[2]
    zeros = np.zeros(m)
    return RoughSetup(grid=grid, fine=W, nodes=np.arange(grid.n), weights=weights,
                      ito_mask=zeros if ito_mask is None else np.asarray(ito_mask, dtype=float),
                      brownian_mask=zeros if brownian_mask is None else np.asarray(brownian_mask, dtype=float),
                      p=p, q=q, cross_mode=cross_mode)


def _rel(lhs, rhs):
    diff = _norm_trailing(lhs - rhs, lhs.ndim - 2)
    return diff / (1.0 + _norm_trailing(lhs, lhs.ndim - 2))


def chen_residual(setup, particles=None):
    """Largest relative defect of each of the four Chen lines over all grid triples.

    Returns ``{"diag", "cross_col", "cross_row", "cross_both"}``: the diagonal
    line, the ``(., omega)`` and ``(omega, .)`` sections and the full table.
    ``particles`` restricts the audit to a subset (default: everybody).
    """
    rows = None if particles is None else np.asarray(particles)
    W = setup.level1 if rows is None else setup.level1[rows]
    n = setup.n
    D = setup.diag_table()
    if rows is not None:
        D = D[rows]
    X = setup.cross_table(rows, rows)
    inc = W[:, None, :, :] - W[:, :, None, :]  # inc[i, a, b] = W_b - W_a
    worst = {"diag": 0.0, "cross_col": 0.0, "cross_row": 0.0, "cross_both": 0.0}
    P = W.shape[0]
    offdiag = ~np.eye(P, dtype=bool)
    for r in range(n):
        for s in range(r, n):
            t = np.arange(s, n)
            lhs = D[:, r, t]
            rhs = D[:, r, s][:, None] + D[:, s, t] + np.einsum("ia,itb->itab", inc[:, r, s], inc[:, s, t])
            worst["diag"] = max(worst["diag"], float(_rel(lhs, rhs).max(initial=0.0)))
            lhs = X[:, :, r, t]
            rhs = (X[:, :, r, s][:, :, None] + X[:, :, s, t]
                   + np.einsum("ja,itb->jitab", inc[:, r, s], inc[:, s, t]))
            rel = _rel(lhs, rhs).max(axis=2)
            full = float(rel.max(initial=0.0))
            sect = float(rel[offdiag].max(initial=0.0)) if P > 1 else full
            worst["cross_both"] = max(worst["cross_both"], full)
            worst["cross_col"] = max(worst["cross_col"], sect)
            worst["cross_row"] = max(worst["cross_row"], float(rel.T[offdiag.T].max(initial=0.0)) if P > 1 else full)
    return worst


def _interval_covariances(cov):
    """``C[a, b, c, d] = E[(W_b - W_a)(W_d - W_c)]`` from the point covariance matrix."""
    return (cov[None, :, None, :] - cov[None, :, :, None] - cov[:, None, None, :] + cov[:, None, :, None])


def covariance_rho_variation_check(spec, grid, rho):
    """Smallest ``K`` with ``sup_{D, D'} sum |E[dW_I dW_J]|^rho <= K |t - s|`` on every window.

    Exhaustive over the first dissection, exact dynamic programme over the
    second one. Desk-scale only (at most 12 grid points).
    """
    if grid.n > 12:
        raise InvalidParameterError("exhaustive covariance check is limited to 12 grid points")
    if rho < 1:
        raise InvalidParameterError("rho must be >= 1")
    t = grid.points
    C = np.abs(_interval_covariances(spec.covariance(t[:, None], t[None, :]))) ** rho
    n = grid.n
    table = np.zeros((n, n))
    for s in range(n):
        for e in range(s + 1, n):
            inner = list(range(s + 1, e))
            best = 0.0
            for mask in range(1 << len(inner)):
                pts = [s] + [inner[k] for k in range(len(inner)) if mask >> k & 1] + [e]
                a, b = np.array(pts[:-1]), np.array(pts[1:])
                g = C[a, b].sum(axis=0)  # g[c, d] summed over the pieces of the first dissection
                best = max(best, _kernels.dp_window(np.ascontiguousarray(g), s, e))
            table[s, e] = best
    lengths = t[None, :] - t[:, None]
    ratios = np.where(lengths > 0, table / np.where(lengths > 0, lengths, 1.0), 0.0)
    return float(ratios.max()), table
