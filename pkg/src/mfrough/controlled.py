"""Controlled paths over a particle ensemble, composition with mean-field
fields, and the compensated rough integral.

Shapes: ``values`` is (M, n, *V), ``dx`` is (M, n, *V, m). The measure
derivative ``dmu`` is either ``None`` (identically zero), an array
(M, M, n, *V, m) indexed ``[i, j, t]``, or a callable ``(t, rows) -> (R, M, *V, m)``
evaluated lazily (local time index ``t``). Particle ``i``'s decomposition is

    X_{s,t}(i) = dx_s(i) W_{s,t}(i) + sum_j w_j dmu_s(i, j) W_{s,t}(j) + R_{s,t}(i).

Tensor contractions against second levels: for an integrand ``Y`` with values
(d, m) and ``dx`` (d, m, m), the diagonal term is ``sum_{j,k} dxY[a,j,k] WW[k,j]``
with ``WW[k, j] = int W^k dW^j``; the cross term pairs ``dmuY(i, J)[a,j,k]`` with
``cross[J, i][k, j] = int (W^J)^k d(W^i)^j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import GridIndexError, InvalidParameterError, UnsupportedFieldError
from .variation import check_weights, lq_norm, _norm_trailing

DMU_EXPONENT = 4.0 / 3.0
CHUNK_BYTES = 64 << 20


@dataclass
class ControlledPath:
    values: np.ndarray
    dx: np.ndarray
    dmu: Union[None, np.ndarray, Callable] = None
    weights: Optional[np.ndarray] = None
    lo: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.dx = np.asarray(self.dx, dtype=float)
        if self.dx.shape[:-1] != self.values.shape:
            raise InvalidParameterError(
                f"dx shape {self.dx.shape} does not extend values shape {self.values.shape}")
        self.weights = check_weights(self.weights, self.values.shape[0])

    @property
    def M(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def hi(self):
        return self.lo + self.n - 1

    @property
    def value_shape(self):
        return self.values.shape[2:]

    @property
    def mu_free(self):
        return self.dmu is None

    def dmu_at(self, t, rows=None):
        """``dmu`` at local time ``t`` for the given rows: (R, M, *V, m)."""
        rows = np.arange(self.M) if rows is None else np.asarray(rows)
        if self.dmu is None:
            return np.zeros((rows.size, self.M) + self.dx.shape[2:])
        if callable(self.dmu):
            return self.dmu(t, rows)
        return self.dmu[rows, :, t]

    def scaled(self, c):
        if self.dmu is None:
            dmu = None
        elif callable(self.dmu):
            dmu = lambda t, rows, f=self.dmu: c * f(t, rows)  # noqa: E731
        else:
            dmu = c * self.dmu
        return ControlledPath(c * self.values, c * self.dx, dmu, self.weights, self.lo)

    def __sub__(self, other):
        if self.values.shape != other.values.shape or self.lo != other.lo:
            raise InvalidParameterError("controlled paths live on different windows")
        if self.dmu is None and other.dmu is None:
            dmu = None
        else:
            a, b = self, other
            dmu = lambda t, rows: a.dmu_at(t, rows) - b.dmu_at(t, rows)  # noqa: E731
        return ControlledPath(self.values - other.values, self.dx - other.dx, dmu, self.weights, self.lo)

    def window(self, a, b):
        """Restriction to the absolute grid window ``[a, b]``."""
        if not self.lo <= a <= b <= self.hi:
            raise GridIndexError(f"window ({a}, {b}) outside [{self.lo}, {self.hi}]")
        sl = slice(a - self.lo, b - self.lo + 1)
        if self.dmu is None:
            dmu = None
        elif callable(self.dmu):
            off = a - self.lo
            dmu = lambda t, rows, f=self.dmu: f(t + off, rows)  # noqa: E731
        else:
            dmu = self.dmu[:, :, sl]
        return ControlledPath(self.values[:, sl], self.dx[:, sl], dmu, self.weights, a)


def _chunk_rows(M, per_row_bytes):
    size = max(1, int(CHUNK_BYTES // max(per_row_bytes, 1)))
    return [np.arange(s, min(s + size, M)) for s in range(0, M, size)]


def _level1(setup, cp):
    if cp.hi >= setup.n:
        raise GridIndexError(f"path window [{cp.lo}, {cp.hi}] exceeds the set-up grid")
    return setup.level1[:, cp.lo:cp.hi + 1]


def remainder(cp, setup):
    """``R[i, s, t]`` on every pair of the path's window: (M, n, n, *V), upper triangle."""
    W = _level1(setup, cp)
    n = cp.n
    inc = W[:, None, :, :] - W[:, :, None, :]  # inc[i, s, t] = W_t - W_s
    X = cp.values
    Xinc = X[:, None] - X[:, :, None]
    R = Xinc - np.einsum("is...k,istk->ist...", cp.dx, inc)
    if cp.dmu is not None:
        w = cp.weights
        per_row = cp.M * int(np.prod(cp.dx.shape[2:])) * 8
        for s in range(n):
            for rows in _chunk_rows(cp.M, per_row):
                D = cp.dmu_at(s, rows)
                R[rows, s] -= np.einsum("iJ...k,J,Jtk->it...", D, w, inc[:, s])
    mask = np.triu(np.ones((n, n)), 1).reshape((1, n, n) + (1,) * len(cp.value_shape))
    return R * mask


@dataclass
class TripleNorm:
    """Per-particle components of the controlled-path norm on one window.

    ``norm = x_var + dx_var + dmu_var + remainder_var`` and ``star`` adds
    ``|X_0| + |dx_0| + <dmu_0>_{4/3}``. ``offending`` lists, per component, a
    ``(particle, s, t)`` triple where the control vanished under a nonzero
    increment (the component is then infinite).
    """

    x_var: np.ndarray
    dx_var: np.ndarray
    dmu_var: np.ndarray
    remainder_var: np.ndarray
    initial: np.ndarray
    offending: dict = field(default_factory=dict)

    @property
    def norm(self):
        return self.x_var + self.dx_var + self.dmu_var + self.remainder_var

    @property
    def star(self):
        return self.initial + self.norm

    def max(self):
        return float(np.max(self.star))


def _ratio_sup(num, den, lo, name, offending):
    """Per-particle sup of ``num / den`` over the strict upper triangle."""
    M, n = num.shape[:2]
    iu = np.triu_indices(n, 1)
    a = num[:, iu[0], iu[1]]
    b = den[:, iu[0], iu[1]]
    if a.size == 0:
        return np.zeros(M)
    bad = (b <= 0) & (a > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(b > 0, a / np.where(b > 0, b, 1.0), 0.0)
    r[bad] = np.inf
    if bad.any():
        i, k = np.argwhere(bad)[0]
        offending[name] = (int(i), lo + int(iu[0][k]), lo + int(iu[1][k]))
    return r.max(axis=1)


def triple_norm(cp, w, p, setup, dmu_exponent=DMU_EXPONENT):
    """Controlled-path norm of ``cp`` against the control ``w`` (a :class:`Control`).

    The control must cover the path window; ratios use ``w^{1/p}`` for the
    path and its derivatives and ``w^{2/p}`` for the remainder.
    """
    ctl = w.restrict(cp.lo, cp.hi)
    wv = np.maximum(ctl.values, 0.0)
    d1 = wv ** (1.0 / p)
    d2 = wv ** (2.0 / p)
    lead = 3
    offending = {}
    Xn = _norm_trailing(cp.values[:, None] - cp.values[:, :, None], lead)
    Dn = _norm_trailing(cp.dx[:, None] - cp.dx[:, :, None], lead)
    Rn = _norm_trailing(remainder(cp, setup), lead)
    x_var = _ratio_sup(Xn, d1, cp.lo, "x", offending)
    dx_var = _ratio_sup(Dn, d1, cp.lo, "dx", offending)
    rem_var = _ratio_sup(Rn, d2, cp.lo, "remainder", offending)
    initial = _norm_trailing(cp.values[:, 0], 1) + _norm_trailing(cp.dx[:, 0], 1)
    if cp.dmu is None:
        dmu_var = np.zeros(cp.M)
    else:
        n = cp.n
        Mn = np.zeros((cp.M, n, n))
        first = None
        for s in range(n):
            Ds = cp.dmu_at(s)
            if s == 0:
                first = lq_norm(_norm_trailing(Ds, 2), cp.weights, dmu_exponent, axis=1)
            for t in range(s + 1, n):
                diff = _norm_trailing(cp.dmu_at(t) - Ds, 2)
                Mn[:, s, t] = lq_norm(diff, cp.weights, dmu_exponent, axis=1)
        dmu_var = _ratio_sup(Mn, d1, cp.lo, "dmu", offending)
        initial = initial + first
    return TripleNorm(x_var, dx_var, dmu_var, rem_var, initial, offending)


class _ComposedDmu:
    """Lazy ``D_mu F(X_t(i), mu_t)(X_t(J)) . dx X_t(J)`` for rows ``i``."""

    def __init__(self, field, X, dxX, weights):
        self.field, self.X, self.dxX, self.w = field, X, dxX, weights

    def factors(self, t, rows):
        cloud = self.X[:, t]
        G = self.field.dmu_eval(cloud[np.asarray(rows)], cloud, self.w, cloud)  # (R, M, d, m, d)
        return G, self.dxX[:, t]

    def __call__(self, t, rows):
        return lions_times_dx(*self.factors(t, rows))


def compose_field(field, X):
    """``F(X_t(i), mu_t)`` as a controlled path with values (d, m).

    ``X`` must have a vanishing measure derivative. The state derivative is
    ``dx F . dx X`` and the measure derivative (kept lazy) is
    ``D_mu F(X_t(i))(X_t(J)) . dx X_t(J)``.
    """
    field.require("dx_eval", "dmu_eval")
    if not X.mu_free:
        raise InvalidParameterError("composition requires a path with zero measure derivative")
    M, n = X.M, X.n
    d, m = field.d, field.m
    if X.value_shape != (d,):
        raise InvalidParameterError(f"path values have shape {X.value_shape}, field expects ({d},)")
    vals = np.empty((M, n, d, m))
    dx = np.empty((M, n, d, m, X.dx.shape[-1]))
    for t in range(n):
        cloud = X.values[:, t]
        vals[:, t] = field.eval(cloud, cloud, X.weights)
        dx[:, t] = np.einsum("iajl,ilk->iajk", field.dx_eval(cloud, cloud, X.weights), X.dx[:, t])
    dmu = None
    if field.mean_field and np.any(X.dx):
        dmu = _ComposedDmu(field, X.values, X.dx, X.weights)
    return ControlledPath(vals, dx, dmu, X.weights, X.lo)


def mean_field_term(D, C, w):
    """``sum_J w_J sum_{j,k} D[i, J, a, j, k] C[J, i, k, j]`` -> (R, d).

    ``D`` is (R, M, d, m, m) and ``C`` the cross level (M, R, m, m) with the
    integrand particle first. Reference route on a materialized cross table.
    """
    return np.einsum("iJajk,J,Jikj->ia", D, w, C, optimize=True)


def lions_times_dx(G, dxX):
    """``G[i, J] . dxX[J]`` over the state index: (R, M, d, m, d) x (M, d, m) -> (R, M, d, m, m)."""
    out = G[..., 0, None] * dxX[None, :, None, None, 0, :]
    for l in range(1, G.shape[-1]):
        out += G[..., l, None] * dxX[None, :, None, None, l, :]
    return out


def cross_contract(setup, u, v, G, w, rows, dxX=None):
    """Mean-field term on ``(u, v)`` from the cell factors of the cross level.

    Same value as :func:`mean_field_term` with ``D = G . dxX`` (``D = G``
    when ``dxX`` is None) but never builds the (M, R, m, m) cross table.
    """
    rows = np.asarray(rows)
    A, dW = setup.cross_factors(u, v, rows)
    R, M, d, m, l = G.shape
    if dxX is None:
        B = np.swapaxes(A, 1, 2)
    else:
        B = np.einsum("Jlk,Jck->Jlc", dxX, A)
    B = B * w[:, None, None]
    Gr = G.transpose(0, 2, 3, 1, 4).reshape(R, d * m, M * l)
    E = (Gr @ B.reshape(M * l, -1)).reshape(R, d, m, -1)
    out = np.einsum("iajc,icj->ia", E, dW)
    if setup.ito_mask.any():
        Gs = G[np.arange(R), rows]
        Ds = Gs if dxX is None else Gs @ dxX[rows][:, None]
        dt = setup.grid.points[v] - setup.grid.points[u]
        out -= 0.5 * dt * w[rows, None] * np.einsum("iakk,k->ia", Ds, setup.ito_mask)
    return out


def germ_step(Y, setup, u, v, include_first=True):
    """Compensated germ of every particle on the absolute pair ``(u, v)``: (M, d).

    ``Y`` has values (d, m); its measure derivative pairs with the cross level
    ``W^perp(., i)``.
    """
    W = setup.level1
    t = u - Y.lo
    out = np.zeros((Y.M, Y.value_shape[0]))
    if include_first:
        out += np.einsum("iaj,ij->ia", Y.values[:, t], W[:, v] - W[:, u])
    if np.any(Y.dx[:, t]):
        out += np.einsum("iajk,ikj->ia", Y.dx[:, t], setup.diag(u, v))
    if Y.dmu is not None:
        per_row = Y.M * 2 * int(np.prod(Y.dx.shape[2:])) * 8
        for rows in _chunk_rows(Y.M, per_row):
            if isinstance(Y.dmu, _ComposedDmu):
                G, dxX = Y.dmu.factors(t, rows)
                out[rows] += cross_contract(setup, u, v, G, Y.weights, rows, dxX)
            else:
                out[rows] += cross_contract(setup, u, v, Y.dmu_at(t, rows), Y.weights, rows)
    return out


def partition_points(s, t, depth=None):
    """Dyadic refinement of the grid window ``[s, t]``; ``None`` means every grid point."""
    if depth is None or (1 << depth) >= t - s:
        return np.arange(s, t + 1)
    pts = np.unique(np.rint(np.linspace(s, t, (1 << depth) + 1)).astype(np.int64))
    return pts


@dataclass
class IntegralResult:
    value: np.ndarray          # int_s^t Y dW, (M, d)
    increment: np.ndarray      # int_s^t Y_{s,u} dW_u, (M, d)
    germ: np.ndarray           # one-piece germ without the Y_s W_{s,t} part, (M, d)
    points: np.ndarray

    @property
    def defect(self):
        return self.increment - self.germ


def rough_integral(Y, setup, window, depth=None):
    """Compensated Riemann sum of ``int Y dW`` over a dyadic refinement of ``window``.

    Left-point germs ``Y_u W_{u,v} + dxY_u WW_{u,v} + <dmuY_u W^perp_{u,v}(., i)>``
    summed over the pieces. Also returns the increment integral
    ``int Y_{s,u} dW_u`` and the single-piece germ for the sewing diagnostics.
    """
    s, t = window
    if not (Y.lo <= s <= t <= Y.hi and t < setup.n):
        raise GridIndexError(f"window ({s}, {t}) not resolvable on the path/grid")
    pts = partition_points(s, t, depth)
    total = np.zeros((Y.M, Y.value_shape[0]))
    for u, v in zip(pts[:-1], pts[1:]):
        total += germ_step(Y, setup, int(u), int(v))
    W = setup.level1
    first = np.einsum("iaj,ij->ia", Y.values[:, s - Y.lo], W[:, t] - W[:, s])
    germ = germ_step(Y, setup, s, t, include_first=False) if t > s else np.zeros_like(total)
    return IntegralResult(total, total - first, germ, pts)


def integral_table(Y, setup):
    """Full-depth increment integrals and single-piece germs on every window pair.

    Returns ``(I, G)`` each (M, n, n, d) with ``I[i, s, t] = int_s^t Y_{s,u} dW_u``.
    """
    n = Y.n
    lo = Y.lo
    M, d = Y.M, Y.value_shape[0]
    steps = np.stack([germ_step(Y, setup, lo + k, lo + k + 1) for k in range(n - 1)], axis=1)
    P = np.concatenate([np.zeros((M, 1, d)), np.cumsum(steps, axis=1)], axis=1)
    W = setup.level1[:, lo:lo + n]
    I = np.zeros((M, n, n, d))
    G = np.zeros((M, n, n, d))
    for s in range(n):
        for t in range(s + 1, n):
            first = np.einsum("iaj,ij->ia", Y.values[:, s], W[:, t] - W[:, s])
            I[:, s, t] = P[:, t] - P[:, s] - first
            G[:, s, t] = germ_step(Y, setup, lo + s, lo + t, include_first=False)
    return I, G


@dataclass
class GermReport:
    max_ratio: float          # max |I - germ| / (|||Y||| w^{3/p})
    c0: float                 # fitted constant (same as max_ratio)
    slope: float              # slope of the upper envelope of log|I - germ| against log w
    ls_slope: float           # plain least-squares slope over all pairs
    n_pairs: int              # pairs whose defect exceeds the rounding floor
    floor: float              # rounding floor below which defects are ignored
    decades: float            # span of w over the kept pairs, in decades


def germ_diagnostics(Y, setup, w, p, norm=None, floor=None, bins=12):
    """Compare sewing defects with ``c0 |||Y||| w^{3/p}`` over every window pair."""
    I, G = integral_table(Y, setup)
    D = _norm_trailing(I - G, 3)
    ctl = w.restrict(Y.lo, Y.hi).values
    if norm is None:
        norm = triple_norm(Y, w, p, setup).norm
    scale = np.abs(I).max(initial=0.0) + np.abs(G).max(initial=0.0)
    floor = 64 * np.finfo(float).eps * max(scale, 1.0) if floor is None else floor
    iu = np.triu_indices(Y.n, 1)
    d = D[:, iu[0], iu[1]]
    wv = ctl[:, iu[0], iu[1]]
    bound = norm[:, None] * wv ** (3.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, d / bound, np.where(d > floor, np.inf, 0.0))
    keep = (d > floor) & (wv > 0)
    slope, ls_slope = np.nan, np.nan
    if keep.sum() >= 3:
        lw, ld = np.log(wv[keep]), np.log(d[keep])
        ls_slope = float(np.polyfit(lw, ld, 1)[0])
        slope = envelope_slope(lw, ld, bins)
    mr = float(ratio.max(initial=0.0))
    span = float((lw.max() - lw.min()) / np.log(10)) if keep.any() else 0.0
    return GermReport(mr, mr, slope, ls_slope, int(keep.sum()), float(floor), span)


def envelope_slope(x, y, bins=12):
    """Slope of the upper envelope of ``y`` against ``x``: binned maxima, least squares."""
    edges = np.linspace(x.min(), x.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    xs, ys = [], []
    for b in range(bins):
        sel = idx == b
        if sel.any():
            k = np.argmax(np.where(sel, y, -np.inf))
            xs.append(x[k])
            ys.append(y[k])
    if len(xs) < 3:
        return np.nan
    return float(np.polyfit(xs, ys, 1)[0])


def lifted_eval(field, x, Z, w):
    """The lifted map ``Z -> F(x, empirical(Z))`` at one state ``x``: (d, m)."""
    return field.eval(np.atleast_2d(x), Z, w)[0]


def lions_derivative_check(field, cloud, x, weights=None, h=1e-5, tol=1e-6):
    """Finite-difference audit of a field's derivatives.

    Checks ``dx F`` against central differences in ``x``, the gradient of the
    lifted map in member ``j`` against ``w_j D_mu F(x, mu)(z_j)`` and, when
    second derivatives are supplied, ``d_x D_mu F`` and ``D_mu d_x F``
    together with their transpose symmetry. Errors are relative to the largest
    analytic entry of each block (absolute when that entry is zero).
    """
    field.require("dx_eval", "dmu_eval")
    Z = np.atleast_2d(np.asarray(cloud, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    M, d = Z.shape
    w = check_weights(weights, M)
    report = {}

    def grade(name, an, fd):
        err = np.abs(an - fd)
        scale = float(np.abs(an).max(initial=0.0))
        rel = float(err.max(initial=0.0)) / (scale if scale > 0 else 1.0)
        entry = {"max_abs": float(err.max(initial=0.0)), "scale": scale, "rel": rel, "pass": rel <= tol}
        if not entry["pass"]:
            idx = np.argwhere(err / (scale if scale > 0 else 1.0) > tol)[:20]
            entry["mismatches"] = [(tuple(int(k) for k in ix), float(an[tuple(ix)]), float(fd[tuple(ix)]))
                                   for ix in idx]
        report[name] = entry

    # state derivative
    fd = np.stack([(lifted_eval(field, x + h * e, Z, w) - lifted_eval(field, x - h * e, Z, w)) / (2 * h)
                   for e in np.eye(d)], axis=-1)
    grade("dx", field.dx_eval(x[None], Z, w)[0], fd)

    # Lions derivative through the lifted map
    an = w[:, None, None, None] * field.dmu_eval(x[None], Z, w, Z)[0]  # (M, d, m, d)
    fd = np.empty_like(an)
    for j in range(M):
        for l in range(d):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[j, l] += h
            Zm[j, l] -= h
            fd[j, ..., l] = (lifted_eval(field, x, Zp, w) - lifted_eval(field, x, Zm, w)) / (2 * h)
    grade("dmu", an, fd)

    if field.dx_dmu is not None and field.dmu_dx is not None:
        an_xm = field.dx_dmu(x[None], Z, w, Z)[0]  # (M, d, m, dz, dx)
        fd_xm = np.stack([(field.dmu_eval((x + h * e)[None], Z, w, Z)[0]
                           - field.dmu_eval((x - h * e)[None], Z, w, Z)[0]) / (2 * h)
                          for e in np.eye(d)], axis=-1)
        grade("dx_dmu", an_xm, fd_xm)
        an_mx = w[:, None, None, None, None] * field.dmu_dx(x[None], Z, w, Z)[0]  # (M, d, m, dx, dz)
        fd_mx = np.empty_like(an_mx)
        for j in range(M):
            for l in range(d):
                Zp, Zm = Z.copy(), Z.copy()
                Zp[j, l] += h
                Zm[j, l] -= h
                fd_mx[j, ..., l] = (field.dx_eval(x[None], Zp, w)[0] - field.dx_eval(x[None], Zm, w)[0]) / (2 * h)
        grade("dmu_dx", an_mx, fd_mx)
        # Schwarz: d_x D_mu F = (D_mu d_x F)^T in the last two axes
        grade("symmetry", w[:, None, None, None, None] * an_xm, np.swapaxes(fd_mx, -1, -2))
    report["pass"] = all(v["pass"] for v in report.values() if isinstance(v, dict))
    return report
