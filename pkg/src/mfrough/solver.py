"""Particle solvers for ``dX = F(X, law(X)) dW`` over a rough set-up.

Two schemes share the same one-step germ:

* the explicit stepper, one pass over the grid, and
* Picard iteration of the map ``Gamma`` on consecutive windows.

Both replace the law by the weighted empirical measure of the ensemble. A
classical Euler-Maruyama particle scheme serves as the reference for Brownian
drivers.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .controlled import (
    ControlledPath,
    _chunk_rows,
    compose_field,
    cross_contract,
    germ_step,
    triple_norm,
)
from .errors import (
    ConfigError,
    InvalidParameterError,
    NonContractionError,
    NonFiniteStateError,
    UnsupportedDriverError,
)
from .rough_setup import particle_rng
from .variation import DEFAULT_Q, build_control, lq_norm

SCHEMES = ("explicit-step", "picard")


@dataclass
class WindowPolicy:
    """How Picard splits ``[0, T]``.

    ``fixed``: windows of ``steps`` grid steps. ``accumulation``: greedy
    windows on which ``max_i w_i^{1/p} <= 1 / (4 L)``; with ``auto`` the
    threshold is halved (``L`` doubled) on a window that fails to contract.
    A window fails after three consecutive non-decreasing residuals, or after
    a single one with ``strict``; the first ratio (away from ``dx = 0``) is
    not monitored.
    """

    kind: str = "accumulation"
    steps: int = 4
    L: float = 1.0
    auto: bool = True
    max_doublings: int = 6
    span: int = 8
    max_partners: int = 64
    strict: bool = False

    def __post_init__(self):
        if self.kind not in ("fixed", "accumulation"):
            raise ConfigError(f"unknown window policy {self.kind!r}")
        if self.kind == "fixed" and self.steps < 1:
            raise ConfigError("fixed windows need at least one step")
        if not self.L > 0:
            raise ConfigError("L must be positive")


@dataclass
class SolveConfig:
    field: object
    setup: object
    X0: np.ndarray
    scheme: str = "explicit-step"
    max_iters: int = 60
    tol: float = 1e-10
    window_policy: WindowPolicy = dc_field(default_factory=WindowPolicy)
    q: float = DEFAULT_Q
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        X0 = np.asarray(self.X0, dtype=float)
        if X0.ndim == 1:
            X0 = X0[:, None]
        if X0.shape[0] != self.setup.M:
            raise ConfigError(f"X0 has {X0.shape[0]} particles, the set-up has {self.setup.M}")
        if X0.shape[1] != self.field.d:
            raise ConfigError(f"X0 has dimension {X0.shape[1]}, the field expects {self.field.d}")
        if self.field.m != self.setup.m:
            raise ConfigError(f"field has {self.field.m} driver columns, the set-up has {self.setup.m}")
        self.X0 = X0


@dataclass
class WindowRecord:
    lo: int
    hi: int
    residuals: list
    residuals_l8: list
    L: float
    certificate: float = np.nan   # |||Gamma(X) - X|||_* after convergence
    max_w: float = np.nan         # max over particles of w(lo, hi)^{1/p}
    threshold: float = np.nan     # 1 / (4 L)

    @property
    def within_threshold(self):
        return bool(self.max_w <= self.threshold)

    @property
    def ratios(self):
        r = np.asarray(self.residuals)
        with np.errstate(divide="ignore", invalid="ignore"):
            return r[1:] / r[:-1]


@dataclass
class Solution:
    X: np.ndarray
    dx: np.ndarray
    diagnostics: dict = dc_field(default_factory=dict)

    def terminal(self):
        return self.X[:, -1]


def _check_finite(x, k):
    if not np.all(np.isfinite(x)):
        bad = int(np.argwhere(~np.isfinite(x))[0][0])
        raise NonFiniteStateError(f"non-finite state at step {k} (particle {bad})", step=k)


def step_terms(field, setup, x, k, weights):
    """The three terms of the one-step expansion at grid step ``k``: (M, d) each."""
    W = setup.level1
    F = field.eval(x, x, weights)
    first = np.einsum("iaj,ij->ia", F, W[:, k + 1] - W[:, k])
    dF = field.dx_eval(x, x, weights)
    second = np.einsum("iajk,ikj->ia", np.einsum("iajl,ilk->iajk", dF, F), setup.diag_step(k))
    third = np.zeros_like(first)
    if field.mean_field:
        d, m = field.d, field.m
        per_row = setup.M * 2 * d * m * d * 8
        for rows in _chunk_rows(setup.M, per_row):
            G = field.dmu_eval(x[rows], x, weights, x)
            third[rows] = cross_contract(setup, k, k + 1, G, weights, rows, F)
    return F, first, second, third


def explicit_step_solve(cfg):
    """One pass of the expansion ``X_{k+1} = X_k + F dW + (dF F) : WW + mean-field term``."""
    field, setup = cfg.field, cfg.setup
    field.require("dx_eval", "dmu_eval")
    M, n, d, m = setup.M, setup.n, field.d, field.m
    w = setup.weights
    X = np.empty((M, n, d))
    dx = np.empty((M, n, d, m))
    X[:, 0] = cfg.X0
    mags = np.zeros((n - 1, 3))
    scale = np.zeros(M)  # per-particle sum of second-order germ terms
    for k in range(n - 1):
        x = X[:, k]
        F, a, b, c = step_terms(field, setup, x, k, w)
        dx[:, k] = F
        X[:, k + 1] = x + a + b + c
        _check_finite(X[:, k + 1], k)
        mags[k] = [np.abs(a).max(), np.abs(b).max(), np.abs(c).max()]
        scale += np.linalg.norm(b, axis=1) + np.linalg.norm(c, axis=1)
    dx[:, -1] = field.eval(X[:, -1], X[:, -1], w)
    return Solution(X, dx, {"scheme": "explicit-step", "term_magnitudes": mags, "germ_scale": scale})


def gamma_map(X0, X, field, setup):
    """``Gamma(X) = (X0 + int F(X, mu) dW ; F(X, mu) ; 0)`` on the window of ``X``."""
    Y = compose_field(field, X)
    M, n, d = X.M, X.n, field.d
    base = np.empty((M, n, d))
    base[:, 0] = X0
    acc = np.array(X0, dtype=float, copy=True)
    for k in range(n - 1):
        acc = acc + germ_step(Y, setup, X.lo + k, X.lo + k + 1)
        base[:, k + 1] = acc
    return ControlledPath(base, Y.values, None, X.weights, X.lo)


def window_control(setup, lo, hi, p, q, max_partners=64, seed=0):
    return build_control(setup, p, q, window=(lo, hi), max_partners=max_partners, seed=seed)


def next_window(setup, start, p, q, alpha, policy, seed=0):
    """End of the accumulation window starting at ``start`` and its control.

    The end is the last grid point before ``max_i w_i(start, .)^{1/p}`` reaches
    ``alpha`` (one step if the first step already does).
    """
    last = setup.n - 1
    span = policy.span
    while True:
        hi = min(start + span, last)
        ctl = window_control(setup, start, hi, p, q, policy.max_partners, seed)
        varpi = ctl.values[:, 0, :].max(axis=0) ** (1.0 / p)
        hits = np.flatnonzero(varpi[1:] >= alpha)
        if hits.size:
            end = start + max(int(hits[0]), 1)
            return end, ctl.restrict(start, end)
        if hi == last:
            return hi, ctl
        span *= 2


def _picard_window(cfg, X_start, lo, hi, ctl, L, strict=False):
    field, setup = cfg.field, cfg.setup
    M, d, m = setup.M, field.d, field.m
    n = hi - lo + 1
    p = setup.p
    X = ControlledPath(np.broadcast_to(X_start[:, None], (M, n, d)).copy(),
                       np.zeros((M, n, d, m)), None, setup.weights, lo)
    res, res8 = [], []
    bad = 0
    for it in range(cfg.max_iters):
        Xn = gamma_map(X_start, X, field, setup)
        _check_finite(Xn.values, lo)
        r = triple_norm(Xn - X, ctl, p, setup).star
        res.append(float(r.max()))
        res8.append(float(lq_norm(r, setup.weights, 8.0)))
        X = Xn
        if res[-1] < cfg.tol:
            break
        # the first step moves dx away from 0, so monitoring starts at n = 1
        if it >= 2 and res[-1] >= res[-2]:
            bad += 1
            if bad >= (1 if strict else 3):
                raise NonContractionError(
                    f"Picard residual did not contract on window [{lo}, {hi}] "
                    f"(L = {L}); shrink the window or increase L", residuals=res)
        else:
            bad = 0
    cert = triple_norm(gamma_map(X_start, X, field, setup) - X, ctl, p, setup).star.max()
    rec = WindowRecord(lo, hi, res, res8, L, float(cert),
                       float(ctl.values[:, 0, -1].max() ** (1.0 / p)), 1.0 / (4.0 * L))
    return X, rec


def picard_solve(cfg):
    """Picard iteration of ``Gamma`` window by window, from ``(X_0; 0; 0)``."""
    field, setup = cfg.field, cfg.setup
    field.require("dx_eval", "dmu_eval")
    pol = cfg.window_policy
    M, n, d, m = setup.M, setup.n, field.d, field.m
    p = setup.p
    X = np.empty((M, n, d))
    dx = np.empty((M, n, d, m))
    X[:, 0] = cfg.X0
    records = []
    start = 0
    L = pol.L
    retries = 0
    while start < n - 1:
        doublings = 0
        while True:
            if pol.kind == "fixed":
                hi = min(start + pol.steps, n - 1)
                ctl = window_control(setup, start, hi, p, cfg.q, pol.max_partners, cfg.seed)
            else:
                hi, ctl = next_window(setup, start, p, cfg.q, 1.0 / (4.0 * L), pol, cfg.seed)
            try:
                path, rec = _picard_window(cfg, X[:, start], start, hi, ctl, L, pol.strict)
                break
            except NonContractionError:
                if pol.kind == "fixed" or not pol.auto or doublings >= pol.max_doublings or hi == start + 1:
                    raise
                L *= 2.0
                doublings += 1
                retries += 1
        X[:, start:hi + 1] = path.values
        dx[:, start:hi + 1] = path.dx
        records.append(rec)
        start = hi
    dx[:, -1] = field.eval(X[:, -1], X[:, -1], setup.weights)
    return Solution(X, dx, {"scheme": "picard", "windows": records, "final_L": L, "retries": retries})


def solve(cfg):
    return explicit_step_solve(cfg) if cfg.scheme == "explicit-step" else picard_solve(cfg)


def stratonovich_drift(field, x, weights):
    """``1/2 sum_{j, l} d_l F^{a j} F^{l j}`` at every particle: (M, d)."""
    F = field.eval(x, x, weights)
    dF = field.dx_eval(x, x, weights)
    return 0.5 * np.einsum("iajl,ilj->ia", dF, F)


def mckean_vlasov_oracle(field, X0, setup, substeps=8, convention="ito", seed=0, record=False):
    """Euler-Maruyama particle scheme driven by the set-up's Brownian increments.

    Each grid step is split into ``substeps`` pieces whose increments are a
    Brownian bridge refinement of the shared step increment, so the oracle and
    the rough solvers see the same driver at grid points. A non-Brownian
    coordinate is allowed only if it is the deterministic time coordinate.
    With ``convention="stratonovich"`` the drift ``1/2 dF . F`` is added.
    Returns the states at the set-up grid points, (M, n, d).
    """
    if convention not in ("ito", "stratonovich"):
        raise InvalidParameterError(f"unknown convention {convention!r}")
    bm = np.asarray(setup.brownian_mask, dtype=bool)
    W = setup.level1
    t = setup.grid.points
    time_cols = ~bm
    if time_cols.any():
        lin = np.allclose(W[:, :, time_cols], t[None, :, None])
        if not lin:
            raise UnsupportedDriverError("the Euler-Maruyama oracle needs a Brownian driver")
    if not bm.any():
        raise UnsupportedDriverError("the Euler-Maruyama oracle needs a Brownian driver")
    M, n = setup.M, setup.n
    X0 = np.asarray(X0, dtype=float).reshape(M, -1)
    w = setup.weights
    rngs = [particle_rng(seed, i) for i in range(M)]
    nb = int(bm.sum())
    x = X0.copy()
    out = np.empty((M, n, X0.shape[1]))
    out[:, 0] = x
    for k in range(n - 1):
        dt = t[k + 1] - t[k]
        h = dt / substeps
        dW = W[:, k + 1] - W[:, k]
        z = np.stack([r.standard_normal((substeps, nb)) for r in rngs])
        inc = np.empty((M, substeps, setup.m))
        inc[:, :, bm] = np.sqrt(h) * (z - z.mean(axis=1, keepdims=True)) + dW[:, None, bm] / substeps
        inc[:, :, ~bm] = dW[:, None, ~bm] / substeps
        for j in range(substeps):
            F = field.eval(x, x, w)
            dxn = np.einsum("iaj,ij->ia", F, inc[:, j])
            if convention == "stratonovich":
                dF = field.dx_eval(x, x, w)
                dxn = dxn + 0.5 * h * np.einsum("iajl,ilj->ia", dF[:, :, bm], F[:, :, bm])
            x = x + dxn
        _check_finite(x, k)
        out[:, k + 1] = x
    return out


@dataclass
class ConvergenceRow:
    K: int
    h: float
    strong: float
    weak: float


@dataclass
class ConvergenceTable:
    rows: list
    strong_slope: float = np.nan
    weak_slope: float = np.nan


def _slope(h, e):
    h, e = np.asarray(h), np.asarray(e)
    ok = e > 0
    if ok.sum() < 3:
        return np.nan
    return float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0])


def convergence_study(field, X0, setup, factors, oracle, scheme="explicit-step",
                      statistic: Optional[Callable] = None, **cfg_kwargs):
    """Strong and weak terminal errors of the solver on coarsened copies of ``setup``.

    ``factors`` are coarsening factors of the fine set-up (coarse increments
    are sums of fine ones); ``oracle`` is the reference terminal ensemble
    (M, d), or a callable ``setup -> (M, d)`` evaluated on every level. Slopes
    of log-error against log-h are fitted with 3 or more levels.
    """
    fixed = None if callable(oracle) else np.asarray(oracle, dtype=float).reshape(setup.M, -1)
    stat = (lambda x: x[:, 0]) if statistic is None else statistic
    w = setup.weights
    rows = []
    for f in sorted(factors, reverse=True):
        sc = setup.coarsen(f) if f > 1 else setup
        sol = solve(SolveConfig(field, sc, X0, scheme=scheme, **cfg_kwargs))
        ref = fixed if fixed is not None else np.asarray(oracle(sc), dtype=float).reshape(setup.M, -1)
        diff = sol.terminal() - ref
        strong = float(np.sqrt(w @ np.einsum("ia,ia->i", diff, diff)))
        weak = float(abs(w @ stat(sol.terminal()) - w @ stat(ref)))
        rows.append(ConvergenceRow(sc.n - 1, sc.grid.T / (sc.n - 1), strong, weak))
    rows.sort(key=lambda r: r.h)
    h = [r.h for r in rows]
    return ConvergenceTable(rows, _slope(h, [r.strong for r in rows]), _slope(h, [r.weak for r in rows]))
