"""Command-line runner: ``mfrough run config.json``.

A config is a JSON object with the sections ``driver``, ``grid``,
``ensemble``, ``field``, ``solver``, ``exponents``, ``outputs`` and optional
per-output ``options``. Every output writes one CSV table (``#`` parameter
lines, then an RFC-4180 header and rows) and contributes pass/fail rows to
``summary.json``. The exit code is 0 iff every row passes.

Seeds: one master seed; each component draws from
``blake2b("<master>:<label>")`` truncated to 64 bits, so adding an output
never changes the randomness of another one.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import fields as fieldlib
from .errors import ConfigError
from .rough_setup import CONVENTIONS, KINDS, DriverSpec, build_setup, chen_residual, particle_rng
from .variation import TimeGrid

OUTPUTS = ("trajectories", "convergence", "chen", "accumulation-tail", "picard-residuals", "lions-check",
           "variation-oracle", "control-properties", "accumulation-bound", "sewing-rate", "exact-identities",
           "cross-scheme")
ENV_OUT_DIR = "MFROUGH_OUT_DIR"
DEFAULT_OUT_DIR = "mfrough-out"

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def derive_seed(master, label):
    h = hashlib.blake2b(f"{int(master)}:{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class ReportRow:
    experiment: str
    metric: str
    parameters: dict
    value: float
    tolerance: float
    passed: bool


# ---------------------------------------------------------------- config


def _get(section, key, default, path, types=None):
    val = section.get(key, default)
    if types is not None and val is not None and not isinstance(val, types):
        raise ConfigError(f"{path}.{key}: expected {types}, got {type(val).__name__}")
    return val


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    return sec


def table_field(x, F):
    """Scalar field ``F(x)`` interpolated linearly from a table; no measure dependence."""
    xs = np.asarray(x, dtype=float)
    Fs = np.asarray(F, dtype=float)
    if xs.ndim != 1 or xs.shape != Fs.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
        raise ConfigError("field.table: x must be increasing and match F in length")
    slopes = np.diff(Fs) / np.diff(xs)

    def ev(x, cloud, w):
        return np.interp(x[:, 0], xs, Fs)[:, None, None]

    def dx(x, cloud, w):
        k = np.clip(np.searchsorted(xs, x[:, 0], side="right") - 1, 0, slopes.size - 1)
        inside = (x[:, 0] >= xs[0]) & (x[:, 0] <= xs[-1])
        return np.where(inside, slopes[k], 0.0)[:, None, None, None]

    def dmu(x, cloud, w, z):
        return np.zeros((len(x), len(z), 1, 1, 1))

    return fieldlib.MeanFieldField("table", 1, 1, ev, dx, dmu, bound=float(np.abs(Fs).max()),
                                   mean_field=False)


def parse_config(cfg, seed_override=None):
    """Validate a config dict; returns a normalised dict of typed objects."""
    if not isinstance(cfg, dict):
        raise ConfigError("top level: expected an object")
    unknown = set(cfg) - {"experiment", "driver", "grid", "ensemble", "field", "solver",
                          "exponents", "outputs", "options", "cross_mode", "memory_budget"}
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")
    name = str(cfg.get("experiment", "experiment"))

    g = _section(cfg, "grid")
    T = float(_get(g, "T", 1.0, "grid", (int, float)))
    K = int(_get(g, "K", 64, "grid", int))
    if not T > 0 or K < 1:
        raise ConfigError("grid: need T > 0 and K >= 1")

    e = _section(cfg, "ensemble")
    M = int(_get(e, "M", 8, "ensemble", int))
    if M < 1:
        raise ConfigError("ensemble.M: must be >= 1")
    master = _get(e, "seed", 0, "ensemble", int)
    if seed_override is not None:
        master = seed_override
    if not 0 <= master < 1 << 64:
        raise ConfigError("ensemble.seed: must be an unsigned 64-bit integer")

    ex = _section(cfg, "exponents")
    q = float(_get(ex, "q", 8.0, "exponents", (int, float)))
    if q < 1:
        raise ConfigError("exponents.q: must be >= 1")

    d = _section(cfg, "driver")
    kind = _get(d, "kind", "brownian", "driver", str)
    if kind not in KINDS:
        raise ConfigError(f"driver.kind: {kind!r} not in {KINDS}")
    conv = _get(d, "convention", "stratonovich-linear", "driver", str)
    if conv not in CONVENTIONS:
        raise ConfigError(f"driver.convention: {conv!r} not in {CONVENTIONS}")
    hurst = float(_get(d, "hurst", 0.5, "driver", (int, float)))
    if kind == "fbm" and not 1 / 3 < hurst <= 1:
        raise ConfigError("driver.hurst: must lie in (1/3, 1]")
    try:
        spec = DriverSpec(kind, int(_get(d, "dimension", 1, "driver", int)),
                          derive_seed(master, "driver"), hurst, conv, d.get("path"),
                          bool(_get(d, "with_time", False, "driver", bool)))
    except ValueError as exc:
        raise ConfigError(f"driver: {exc}") from None
    p = ex.get("p", spec.default_p())
    if not isinstance(p, (int, float)) or not 2 <= p < 3:
        raise ConfigError("exponents.p: must lie in [2, 3)")
    if kind == "fbm" and not p > 2 * spec.rho:
        raise ConfigError(f"exponents.p: fbm with H={hurst} needs p > {2 * spec.rho}")

    f = _section(cfg, "field")
    m = spec.dimension + int(spec.with_time)
    if "table" in f:
        field = table_field(f["table"].get("x"), f["table"].get("F"))
    else:
        fname = _get(f, "name", None, "field", str)
        if fname is None:
            raise ConfigError("field.name: required (or field.table)")
        params = _get(f, "params", {}, "field", dict)
        field = fieldlib.make_field(fname, d=int(_get(f, "d", m, "field", int)), **params)
    if field.m != m:
        raise ConfigError(f"field: {field.name!r} has {field.m} driver columns, the driver has {m}")

    x0 = _get(e, "x0", {"mean": 1.0, "std": 0.0}, "ensemble", (dict, list, int, float))
    if isinstance(x0, dict):
        mean = np.broadcast_to(np.asarray(x0.get("mean", 1.0), dtype=float), (field.d,))
        std = float(x0.get("std", 0.0))
        s0 = derive_seed(master, "x0")
        X0 = np.stack([mean + std * particle_rng(s0, i).standard_normal(field.d) for i in range(M)])
    else:
        X0 = np.asarray(x0, dtype=float).reshape(M, -1) if np.ndim(x0) else np.full((M, field.d), float(x0))
    if X0.shape != (M, field.d):
        raise ConfigError(f"ensemble.x0: expected {M} x {field.d} values")

    s = _section(cfg, "solver")
    scheme = _get(s, "scheme", "explicit-step", "solver", str)
    wp = _get(s, "window_policy", {}, "solver", dict)

    outputs = cfg.get("outputs", ["trajectories"])
    if not isinstance(outputs, list) or not outputs:
        raise ConfigError("outputs: expected a non-empty list")
    for o in outputs:
        if o not in OUTPUTS:
            raise ConfigError(f"outputs: unknown output {o!r}; choose from {OUTPUTS}")
    options = _section(cfg, "options")
    cross_mode = cfg.get("cross_mode", "auto")
    if cross_mode not in ("auto", "materialize-steps", "on-demand"):
        raise ConfigError("cross_mode: must be auto, materialize-steps or on-demand")

    from .solver import SCHEMES, WindowPolicy  # noqa: PLC0415
    if scheme not in SCHEMES:
        raise ConfigError(f"solver.scheme: {scheme!r} not in {SCHEMES}")
    try:
        policy = WindowPolicy(**wp)
    except TypeError as exc:
        raise ConfigError(f"solver.window_policy: {exc}") from None
    return {
        "experiment": name, "T": T, "K": K, "M": M, "master": master, "p": float(p), "q": q,
        "spec": spec, "field": field, "X0": X0, "scheme": scheme, "policy": policy,
        "max_iters": int(_get(s, "max_iters", 60, "solver", int)),
        "tol": float(_get(s, "tol", 1e-10, "solver", (int, float))),
        "outputs": outputs, "options": options, "cross_mode": cross_mode,
        "memory_budget": int(cfg.get("memory_budget", 1 << 30)),
    }


# ---------------------------------------------------------------- output


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(params, header, rows):
    buf = io.StringIO()
    for k in sorted(params):
        buf.write(f"# {k}={fmt(params[k])}\r\n")
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _params(c, **extra):
    spec = c["spec"]
    out = {
        "experiment": c["experiment"], "driver.kind": spec.kind, "driver.dimension": spec.dimension,
        "driver.hurst": spec.hurst, "driver.convention": spec.convention,
        "driver.with_time": spec.with_time, "grid.T": c["T"], "grid.K": c["K"], "ensemble.M": c["M"],
        "seed": c["master"], "field": c["field"].name, "p": c["p"], "q": c["q"],
        "solver.scheme": c["scheme"],
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------- pipelines


def _setup(c, M=None, K=None, spec=None, mode=None):
    M = c["M"] if M is None else M
    K = c["K"] if K is None else K
    spec = c["spec"] if spec is None else spec
    mode = c["cross_mode"] if mode is None else mode
    if mode == "auto":
        need = K * M * M * (spec.dimension + spec.with_time) ** 2 * 8
        mode = "materialize-steps" if need <= c["memory_budget"] else "on-demand"
    return build_setup(spec, TimeGrid.uniform(c["T"], K), M, p=c["p"], q=c["q"], cross_mode=mode,
                       memory_budget=c["memory_budget"])


def _solve_cfg(c, setup, scheme=None):
    from .solver import SolveConfig  # noqa: PLC0415
    return SolveConfig(c["field"], setup, c["X0"], scheme=scheme or c["scheme"], max_iters=c["max_iters"],
                       tol=c["tol"], window_policy=c["policy"], q=c["q"],
                       seed=derive_seed(c["master"], "partners"))


def out_trajectories(c, out_dir):
    from .solver import solve  # noqa: PLC0415
    setup = _setup(c)
    sol = solve(_solve_cfg(c, setup))
    t = setup.grid.points
    rows = [[i, k, t[k], *sol.X[i, k]] for i in range(setup.M) for k in range(setup.n)]
    header = ["particle", "step", "t"] + [f"x{a}" for a in range(sol.X.shape[2])]
    atomic_write(os.path.join(out_dir, "trajectories.csv"), csv_text(_params(c), header, rows))
    finite = bool(np.all(np.isfinite(sol.X)))
    return [ReportRow(c["experiment"], "trajectories.finite", {}, float(finite), 1.0, finite)]


def out_chen(c, out_dir):
    o = c["options"].get("chen", {})
    tol = float(o.get("tol", 1e-10))
    setup = _setup(c, M=int(o.get("M", c["M"])), K=int(o.get("K", c["K"])), mode="on-demand")
    res = chen_residual(setup)
    rows = [[k, v, tol, v <= tol] for k, v in res.items()]
    atomic_write(os.path.join(out_dir, "chen.csv"),
                 csv_text(_params(c, **{"chen.M": setup.M, "chen.K": setup.n - 1}),
                          ["relation", "max_residual", "tolerance", "pass"], rows))
    return [ReportRow(c["experiment"], f"chen.{k}", {"M": setup.M, "K": setup.n - 1}, v, tol, v <= tol)
            for k, v in res.items()]


def out_convergence(c, out_dir):
    from .solver import convergence_study, mckean_vlasov_oracle  # noqa: PLC0415
    o = c["options"].get("convergence", {})
    factors = [int(f) for f in o.get("factors", [8, 4, 2, 1])]
    oracle_kind = o.get("oracle", "em")
    setup = _setup(c, mode="on-demand")
    if oracle_kind == "exact-linear":
        if c["field"].name != "linear-x":
            raise ConfigError("options.convergence.oracle: exact-linear needs the linear-x field")
        if setup.ito_mask.any():
            raise ConfigError("options.convergence.oracle: exact-linear needs the Stratonovich lift")
        sigma = float(c["field"].eval(np.ones((1, 1)), np.ones((1, 1)), np.ones(1))[0, 0, 0])
        oracle = c["X0"] * np.exp(sigma * setup.level1[:, -1, :c["field"].d])
        default_slope = 0.9
    elif oracle_kind == "em":
        conv = "ito" if setup.ito_mask.any() else "stratonovich"
        substeps, oseed = int(o.get("substeps", 8)), derive_seed(c["master"], "oracle")

        def oracle(sc):
            # rebuilt on every level: substeps refine that level's own grid
            return mckean_vlasov_oracle(c["field"], c["X0"], sc, substeps, conv, seed=oseed)[:, -1]
        default_slope = 0.4
    else:
        raise ConfigError(f"options.convergence.oracle: unknown oracle {oracle_kind!r}")
    min_slope = float(o.get("min_slope", default_slope))
    tab = convergence_study(c["field"], c["X0"], setup, factors, oracle, scheme=c["scheme"],
                            max_iters=c["max_iters"], tol=c["tol"], window_policy=c["policy"], q=c["q"])
    rows = [[r.K, r.h, r.strong, r.weak] for r in tab.rows]
    params = _params(c, **{"convergence.oracle": oracle_kind, "convergence.factors": " ".join(map(str, factors)),
                           "convergence.strong_slope": tab.strong_slope, "convergence.weak_slope": tab.weak_slope})
    atomic_write(os.path.join(out_dir, "convergence.csv"), csv_text(params, ["K", "h", "strong_error", "weak_error"], rows))
    ok = bool(np.isfinite(tab.strong_slope) and tab.strong_slope >= min_slope)
    return [ReportRow(c["experiment"], "convergence.strong_slope", {"oracle": oracle_kind, "factors": factors},
                      tab.strong_slope, min_slope, ok)]


def out_tail(c, out_dir):
    from .diagnostics import accumulation_samples, tail_estimate  # noqa: PLC0415
    o = c["options"].get("accumulation-tail", {})
    M, K = int(o.get("M", c["M"])), int(o.get("K", c["K"]))
    batches, alpha = int(o.get("batches", 64)), float(o.get("alpha", 1.0))
    base = derive_seed(c["master"], "tail")
    spec = c["spec"]
    N, w = accumulation_samples(spec, c["T"], K, M, batches, alpha, p=c["p"], q=c["q"],
                                seed_of_batch=lambda b: derive_seed(base, f"batch{b}"))
    rep = tail_estimate(N, "N")
    wrep = tail_estimate(w, "w", min_count=1)
    dec = np.concatenate([[np.nan], rep.decay_slopes])
    rows = [[lv, ct, s, np.log(s), dv] for lv, ct, s, dv in zip(rep.levels, rep.counts, rep.survival, dec)]
    params = _params(c, **{"tail.M": M, "tail.K": K, "tail.batches": batches, "tail.alpha": alpha,
                           "tail.concave": rep.concave, "tail.monotone_decay": rep.monotone_decay,
                           "tail.weibull_shape": rep.weibull_shape, "tail.reliable": rep.reliable,
                           "tail.w_weibull_shape": wrep.weibull_shape})
    atomic_write(os.path.join(out_dir, "accumulation_tail.csv"),
                 csv_text(params, ["level", "count", "survival", "log_survival", "decay_slope"], rows))
    ok = rep.monotone_decay and rep.reliable
    return [ReportRow(c["experiment"], "accumulation_tail.monotone_decay", {"alpha": alpha, "batches": batches},
                      float(rep.monotone_decay), 1.0, bool(ok))]


def out_picard(c, out_dir):
    from .solver import picard_solve  # noqa: PLC0415
    setup = _setup(c)
    sol = picard_solve(_solve_cfg(c, setup, scheme="picard"))
    rows, ok = [], True
    for wi, rec in enumerate(sol.diagnostics["windows"]):
        ratios = np.concatenate([[np.nan], rec.ratios])
        for it, (r, r8, q) in enumerate(zip(rec.residuals, rec.residuals_l8, ratios)):
            rows.append([wi, rec.lo, rec.hi, it, r, r8, q, rec.max_w, rec.threshold])
        if not rec.within_threshold:
            continue
        later = rec.ratios[1:]  # n >= 1
        contracting = np.all(later[np.isfinite(later)] < 1)
        ok = ok and bool(contracting) and rec.residuals[-1] < c["tol"]
    atomic_write(os.path.join(out_dir, "picard_residuals.csv"),
                 csv_text(_params(c), ["window", "lo", "hi", "iteration", "residual", "residual_l8", "ratio",
                                       "max_w_1p", "threshold"], rows))
    return [ReportRow(c["experiment"], "picard.contraction", {"windows": len(sol.diagnostics["windows"])},
                      float(ok), 1.0, ok)]


def out_lions(c, out_dir):
    from .controlled import lions_derivative_check  # noqa: PLC0415
    o = c["options"].get("lions-check", {})
    tol = float(o.get("tol", 1e-6))
    n = int(o.get("cloud_size", 6))
    rng = np.random.default_rng(derive_seed(c["master"], "lions"))
    d = c["field"].d
    rep = lions_derivative_check(c["field"], rng.standard_normal((n, d)), rng.standard_normal(d),
                                 h=float(o.get("h", 1e-5)), tol=tol)
    blocks = [(k, v) for k, v in rep.items() if isinstance(v, dict)]
    rows = [[k, v["max_abs"], v["scale"], v["rel"], tol, v["pass"]] for k, v in blocks]
    atomic_write(os.path.join(out_dir, "lions_check.csv"),
                 csv_text(_params(c, **{"lions.cloud_size": n}),
                          ["block", "max_abs", "scale", "rel", "tolerance", "pass"], rows))
    return [ReportRow(c["experiment"], f"lions.{k}", {"cloud_size": n}, v["rel"], tol, v["pass"]) for k, v in blocks]


def out_variation_oracle(c, out_dir):
    from .variation import brute_force_p_variation, p_variation  # noqa: PLC0415
    o = c["options"].get("variation-oracle", {})
    paths, max_points = int(o.get("paths", 100)), int(o.get("max_points", 8))
    rng = np.random.default_rng(derive_seed(c["master"], "pvar"))
    rows, worst = [], 0.0
    for i in range(paths):
        n, dim, p = int(rng.integers(2, max_points + 1)), int(rng.integers(1, 3)), float(rng.uniform(1.0, 4.0))
        x = np.cumsum(rng.standard_normal((n, dim)), axis=0)
        dp, bf = p_variation(x, p=p), brute_force_p_variation(x, p=p)
        worst = max(worst, abs(dp - bf))
        rows.append([i, n, dim, p, dp, bf, dp == bf])
    atomic_write(os.path.join(out_dir, "variation_oracle.csv"),
                 csv_text(_params(c, **{"pvar.paths": paths, "pvar.max_points": max_points}),
                          ["path", "points", "dimension", "p", "dp", "brute_force", "equal"], rows))
    return [ReportRow(c["experiment"], "pvar.max_abs_difference", {"paths": paths, "max_points": max_points},
                      worst, 0.0, worst == 0.0)]


def out_control(c, out_dir):
    from .variation import build_control_v, build_control_w, lq_norm  # noqa: PLC0415
    o = c["options"].get("control-properties", {})
    M, K, seeds = int(o.get("M", 4)), int(o.get("K", 12)), int(o.get("seeds", 10))
    slack = float(o.get("slack", 1e-12))
    rows = []
    for s in range(seeds):
        spec = replace(c["spec"], seed=derive_seed(c["master"], f"control{s}"))
        setup = _setup(c, M=M, K=K, spec=spec, mode="on-demand")
        w = build_control_w(build_control_v(setup, c["p"], c["q"]), c["q"], setup.weights).values
        # (w[r,s] + w[s,t] - w[r,t]) / w[r,t] over r <= s <= t
        lhs = w[:, :, :, None] + w[:, None, :, :]
        top = np.broadcast_to(w[:, :, None, :], lhs.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(top > 0, (lhs - top) / top, np.where(lhs > 0, np.inf, 0.0))
        r, m, t = np.ogrid[:K + 1, :K + 1, :K + 1]
        rel = np.where((r <= m) & (m <= t), rel, -np.inf)
        iu = np.triu_indices(K + 1, 1)
        moments = lq_norm(w, setup.weights, c["q"])[iu]
        ratio = float((moments / (2 * w[:, iu[0], iu[1]].min(axis=0))).max())
        rows.append([s, float(rel.max()), ratio])
    sup, lq = max(r[1] for r in rows), max(r[2] for r in rows)
    atomic_write(os.path.join(out_dir, "control_properties.csv"),
                 csv_text(_params(c, **{"control.M": M, "control.K": K, "control.seeds": seeds}),
                          ["seed_index", "superadditivity_defect", "lq_over_twice_min"], rows))
    par = {"M": M, "K": K, "seeds": seeds}
    return [ReportRow(c["experiment"], "control.superadditivity_defect", par, sup, slack, sup <= slack),
            ReportRow(c["experiment"], "control.lq_over_twice_min", par, lq, 1.0, lq <= 1.0 + slack)]


def out_accumulation_bound(c, out_dir):
    from .diagnostics import accumulation_split_check  # noqa: PLC0415
    o = c["options"].get("accumulation-bound", {})
    pairs = int(o.get("pairs", 100))
    rep = accumulation_split_check(derive_seed(c["master"], "accumulation"), pairs)
    rows = [["max", rep.max_form_violations, pairs], ["sum", rep.sum_form_violations, pairs]]
    params = _params(c, **{"accumulation.pairs": pairs,
                           "accumulation.first_max_violation": " ".join(map(fmt, rep.first_violation or ()))})
    atomic_write(os.path.join(out_dir, "accumulation_bound.csv"),
                 csv_text(params, ["form", "violations", "pairs"], rows))
    return [ReportRow(c["experiment"], f"accumulation.{form}_form_violations", {"pairs": pairs},
                      float(v), 0.0, v == 0) for form, v, _ in rows]


def _power_integrand(setup, power):
    from .controlled import ControlledPath  # noqa: PLC0415
    W = setup.level1[..., 0]
    return ControlledPath((W ** power)[..., None, None], (power * W ** (power - 1))[..., None, None, None])


def out_sewing(c, out_dir):
    from .controlled import germ_diagnostics  # noqa: PLC0415
    from .variation import build_control  # noqa: PLC0415
    o = c["options"].get("sewing-rate", {})
    M, K = int(o.get("M", 4)), int(o.get("K", 256))
    spec = DriverSpec("brownian", 1, derive_seed(c["master"], "sewing"))
    setup = _setup(c, M=M, K=K, spec=spec, mode="on-demand")
    w = build_control(setup, c["p"], c["q"])
    target = 3.0 / c["p"] - 0.1
    rows, out = [], []
    for power in (1, 2):
        rep = germ_diagnostics(_power_integrand(setup, power), setup, w, c["p"])
        rows.append([power, rep.slope, rep.ls_slope, rep.n_pairs, rep.decades, rep.max_ratio, rep.floor])
        ok = bool(np.isfinite(rep.slope) and rep.slope >= target and rep.decades >= 2)
        out.append(ReportRow(c["experiment"], f"sewing.slope.W{power}",
                             {"M": M, "K": K, "pairs": rep.n_pairs, "decades": rep.decades}, rep.slope, target, ok))
    atomic_write(os.path.join(out_dir, "sewing_rate.csv"),
                 csv_text(_params(c, **{"sewing.M": M, "sewing.K": K}),
                          ["power", "envelope_slope", "ls_slope", "pairs", "decades", "max_ratio", "floor"], rows))
    return out


def out_identities(c, out_dir):
    from .controlled import rough_integral  # noqa: PLC0415
    o = c["options"].get("exact-identities", {})
    M = int(o.get("M", 8))
    levels = [int(k) for k in o.get("K", [256, 1024, 4096])]
    g = TimeGrid.uniform(1.0, 64)
    det = build_setup(DriverSpec("deterministic", 1, path=g.points), g, 1)
    r_err = abs(rough_integral(_power_integrand(det, 1), det, (0, 64)).value[0, 0] - 0.5)
    spec = DriverSpec("brownian", 1, derive_seed(c["master"], "identities"))
    rows, errs = [["int_r_dr", 64, r_err]], []
    for K in levels:
        s = build_setup(spec, TimeGrid.uniform(1.0, K), M, cross_mode="on-demand")
        I = rough_integral(_power_integrand(s, 1), s, (0, K)).value[:, 0]
        err = float(np.abs(I - 0.5 * s.level1[:, -1, 0] ** 2).max())
        floor = 64 * np.finfo(float).eps * max(float(np.abs(I).max()), 1.0)
        errs.append((err, floor))
        rows.append(["stratonovich_w_dw", K, err])
    # refinement may not increase the error beyond the rounding floor
    decreasing = all(b[0] <= a[0] + max(a[1], b[1]) for a, b in zip(errs[:-1], errs[1:]))
    atomic_write(os.path.join(out_dir, "exact_identities.csv"),
                 csv_text(_params(c, **{"identities.M": M}), ["identity", "K", "max_error"], rows))
    e = c["experiment"]
    return [ReportRow(e, "identity.int_r_dr", {"K": 64}, r_err, 1e-14, r_err <= 1e-14),
            ReportRow(e, "identity.stratonovich_w_dw", {"K": levels[-1], "M": M}, errs[-1][0], 1e-3,
                      errs[-1][0] <= 1e-3),
            ReportRow(e, "identity.stratonovich_w_dw.decreasing", {"K": levels}, float(decreasing), 1.0,
                      decreasing)]


def out_cross_scheme(c, out_dir):
    from .solver import WindowPolicy, explicit_step_solve, picard_solve  # noqa: PLC0415
    o = c["options"].get("cross-scheme", {})
    factor = float(o.get("factor", 10.0))
    steps = int(o.get("window_steps", 4))
    setup = _setup(c, mode="on-demand")
    cfg = _solve_cfg(c, setup, scheme="explicit-step")
    ex = explicit_step_solve(cfg)
    pc = picard_solve(replace(cfg, scheme="picard", window_policy=WindowPolicy(kind="fixed", steps=steps)))
    diff = np.linalg.norm(pc.terminal() - ex.terminal(), axis=1)
    bound = factor * ex.diagnostics["germ_scale"]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, diff / bound, np.where(diff > 0, np.inf, 0.0))
    rows = [[i, diff[i], ex.diagnostics["germ_scale"][i], ratio[i]] for i in range(setup.M)]
    atomic_write(os.path.join(out_dir, "cross_scheme.csv"),
                 csv_text(_params(c, **{"cross.factor": factor, "cross.window_steps": steps}),
                          ["particle", "terminal_difference", "germ_scale", "ratio_to_bound"], rows))
    worst = float(ratio.max())
    return [ReportRow(c["experiment"], "cross_scheme.max_ratio_to_bound", {"factor": factor, "window_steps": steps},
                      worst, 1.0, worst <= 1.0)]


PIPELINES = {
    "trajectories": out_trajectories,
    "convergence": out_convergence,
    "chen": out_chen,
    "accumulation-tail": out_tail,
    "picard-residuals": out_picard,
    "lions-check": out_lions,
    "variation-oracle": out_variation_oracle,
    "control-properties": out_control,
    "accumulation-bound": out_accumulation_bound,
    "sewing-rate": out_sewing,
    "exact-identities": out_identities,
    "cross-scheme": out_cross_scheme,
}


def run(config_path, out_dir=None, seed=None, stream=None):
    """Run every requested output; returns ``(exit_code, rows)``."""
    stream = stream or sys.stdout
    try:
        with open(config_path) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG, []
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        print(f"error: {config_path}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG, []
    try:
        c = parse_config(raw, seed)
    except (ConfigError, ValueError) as exc:
        print(f"error: {config_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG, []
    out_dir = out_dir or os.environ.get(ENV_OUT_DIR) or DEFAULT_OUT_DIR
    rows = []
    for name in c["outputs"]:
        t0 = time.perf_counter()
        try:
            rows.extend(PIPELINES[name](c, out_dir))
        except ConfigError as exc:
            print(f"error: {config_path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG, rows
        except Exception as exc:  # noqa: BLE001
            print(f"error: output {name!r} failed in {type(exc).__module__}.{type(exc).__name__}: {exc}",
                  file=sys.stderr)
            return EXIT_RUNTIME, rows
        print(f"{name}: done in {time.perf_counter() - t0:.2f}s", file=stream)
    summary = {
        "experiment": c["experiment"],
        "parameters": {k: v for k, v in _params(c).items()},
        "rows": [asdict(r) for r in rows],
        "all_pass": all(r.passed for r in rows),
    }
    atomic_write(os.path.join(out_dir, "summary.json"),
                 json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.metric} value={fmt(r.value)} tol={fmt(r.tolerance)}",
              file=stream)
    return (EXIT_OK if summary["all_pass"] else EXIT_FAIL), rows


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def list_builtins(stream=None):
    stream = stream or sys.stdout
    print("fields: " + ", ".join(sorted(fieldlib.BUILTINS)) + ", table", file=stream)
    print("outputs: " + ", ".join(OUTPUTS), file=stream)
    print("drivers: " + ", ".join(KINDS), file=stream)
    print("conventions: " + ", ".join(CONVENTIONS), file=stream)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="mfrough", description="Mean-field rough differential equation experiments")
    ap.add_argument("--list-builtins", action="store_true", help="list builtin fields and outputs")
    sub = ap.add_subparsers(dest="command")
    rp = sub.add_parser("run", help="run a config file")
    rp.add_argument("config")
    for p in (ap, rp):
        p.add_argument("--out-dir", default=argparse.SUPPRESS,
                       help=f"output directory (default ${ENV_OUT_DIR} or ./{DEFAULT_OUT_DIR})")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the master seed")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="numba worker threads")
    args = ap.parse_args(argv)
    if args.list_builtins:
        list_builtins()
        return EXIT_OK
    if args.command != "run":
        ap.print_usage(sys.stderr)
        return EXIT_CONFIG
    threads = getattr(args, "threads", None)
    if threads is not None:
        import numba  # noqa: PLC0415
        if not 1 <= threads <= numba.config.NUMBA_NUM_THREADS:
            print(f"error: --threads must lie in [1, {numba.config.NUMBA_NUM_THREADS}]", file=sys.stderr)
            return EXIT_CONFIG
        numba.set_num_threads(threads)
    seed = getattr(args, "seed", None)
    if seed is not None and not 0 <= seed < 1 << 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    code, _ = run(args.config, getattr(args, "out_dir", None), seed)
    return code


if __name__ == "__main__":
    sys.exit(main())
