import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfrough.controlled import (
    ControlledPath,
    compose_field,
    cross_contract,
    germ_diagnostics,
    integral_table,
    lions_times_dx,
    mean_field_term,
    partition_points,
    remainder,
    rough_integral,
    triple_norm,
)
from mfrough.errors import GridIndexError, InvalidParameterError
from mfrough.fields import make_field
from mfrough.rough_setup import DriverSpec, build_setup
from mfrough.variation import TimeGrid, build_control, lq_norm


def brownian(M=4, K=16, d=1, seed=0, T=1.0, **kw):
    return build_setup(DriverSpec("brownian", d, seed, **kw), TimeGrid.uniform(T, K), M, cross_mode="on-demand")


def w_path(s, power=1):
    """``W^power`` for scalar drivers as a mu-free controlled path with values (1,)."""
    W = s.level1[..., 0]
    return ControlledPath((W ** power)[..., None], (power * W ** (power - 1))[..., None, None])


def integrand(s, power=1):
    """Same path as an integrand with values (1, 1)."""
    W = s.level1[..., 0]
    return ControlledPath((W ** power)[..., None, None], (power * W ** (power - 1))[..., None, None, None])


def test_shape_and_window_checks():
    with pytest.raises(InvalidParameterError):
        ControlledPath(np.zeros((2, 3, 1)), np.zeros((2, 3, 2, 1)))
    s = brownian()
    X = w_path(s)
    sub = X.window(3, 7)
    assert sub.lo == 3 and sub.n == 5 and sub.hi == 7
    with pytest.raises(GridIndexError):
        X.window(5, 20)
    with pytest.raises(InvalidParameterError):
        X - sub


def test_remainder_of_linear_and_quadratic_paths():
    s = brownian(seed=1)
    assert np.abs(remainder(w_path(s).scaled(3.0), s)).max() < 1e-14
    R = remainder(w_path(s, 2), s)
    W = s.level1[..., 0]
    inc = W[:, None, :] - W[:, :, None]
    assert np.allclose(R[..., 0], inc ** 2 * np.triu(np.ones((17, 17)), 1))


def test_triple_norm_homogeneous_and_star():
    s = brownian(seed=2)
    w = build_control(s, s.p)
    X = w_path(s, 2)
    a = triple_norm(X, w, s.p, s)
    b = triple_norm(X.scaled(-2.5), w, s.p, s)
    assert np.allclose(b.norm, 2.5 * a.norm, rtol=1e-12)
    assert np.all(a.star >= a.norm)


def test_triple_norm_flags_vanishing_control():
    s = brownian(M=2, K=4)
    w = build_control(s, s.p)
    w.values[:] = 0.0
    res = triple_norm(w_path(s), w, s.p, s)
    assert np.isinf(res.x_var).all()
    assert "x" in res.offending


def test_moment_bound_for_controlled_paths():
    s = brownian(M=16, K=12, seed=3)
    w = build_control(s, s.p)
    X = w_path(s, 2)
    norm = triple_norm(X, w, s.p, s).norm
    inc = np.abs(X.values[:, None, :, 0] - X.values[:, :, None, 0])
    lhs = lq_norm(inc, s.weights, 2.0)
    rhs = 2 * lq_norm(norm, s.weights, 4.0) * w.values ** (1 / s.p)
    iu = np.triu_indices(13, 1)
    assert np.all(lhs[iu][None] <= rhs[:, iu[0], iu[1]] * (1 + 1e-12))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["stratonovich-linear", "ito-correction"]),
       st.integers(1, 2), st.integers(1, 3))
def test_factored_contraction_equals_dense_route(seed, conv, d, factor):
    s = brownian(M=5, K=6, d=d, seed=seed, convention=conv).coarsen(factor)
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((3, 5, 2, d, 2))
    dxX = rng.standard_normal((5, 2, d))
    w = rng.dirichlet(np.ones(5))
    rows = rng.choice(5, size=3, replace=False)
    for u, v in [(0, 1), (0, s.n - 1)]:
        C = s.cross_pair(u, v, cols=rows)
        dense = mean_field_term(lions_times_dx(G, dxX), C, w)
        assert np.allclose(cross_contract(s, u, v, G, w, rows, dxX), dense, atol=1e-12)
        G2 = rng.standard_normal((3, 5, 2, d, d))
        assert np.allclose(cross_contract(s, u, v, G2, w, rows), mean_field_term(G2, C, w), atol=1e-12)


def test_compose_field_derivatives():
    s = brownian(M=3, K=4, seed=4)
    X = w_path(s, 2)
    f = make_field("conv-kernel", 1)
    Y = compose_field(f, X)
    t = 2
    cloud = X.values[:, t]
    assert np.allclose(Y.values[:, t], f.eval(cloud, cloud, X.weights))
    expect = f.dx_eval(cloud, cloud, X.weights)[..., 0] * X.dx[:, t, 0, 0][:, None, None]
    assert np.allclose(Y.dx[:, t, ..., 0], expect)
    D = Y.dmu_at(t)
    G = f.dmu_eval(cloud, cloud, X.weights, cloud)
    assert np.allclose(D[..., 0], G[..., 0] * X.dx[None, :, t, 0, 0, None, None])
    with pytest.raises(InvalidParameterError):
        compose_field(f, ControlledPath(X.values, X.dx, lambda t, r: 0, None))


def test_deterministic_integral_of_time():
    g = TimeGrid.uniform(1.0, 64)
    s = build_setup(DriverSpec("deterministic", 1, path=g.points), g, 1)
    Y = integrand(s)
    assert rough_integral(Y, s, (0, 64)).value[0, 0] == pytest.approx(0.5, abs=1e-14)


@pytest.mark.parametrize("conv", ["stratonovich-linear", "ito-correction"])
def test_integral_of_brownian_against_itself(conv):
    s = brownian(M=6, K=256, seed=5, convention=conv)
    W = s.level1[:, -1, 0]
    I = rough_integral(integrand(s), s, (0, 256)).value[:, 0]
    expected = 0.5 * W ** 2 - (0.5 if conv == "ito-correction" else 0.0)
    assert np.allclose(I, expected, atol=1e-12)


def test_partition_points():
    assert list(partition_points(2, 6)) == [2, 3, 4, 5, 6]
    assert list(partition_points(0, 16, depth=2)) == [0, 4, 8, 12, 16]
    assert list(partition_points(0, 3, depth=4)) == [0, 1, 2, 3]


def test_coarser_partitions_converge_to_full_sum():
    s = brownian(M=8, K=128, seed=6, convention="ito-correction")
    X = w_path(s, 1).scaled(0.5)
    Y = compose_field(make_field("g-of-mean", 1), ControlledPath(1.0 + X.values, X.dx))
    full = rough_integral(Y, s, (0, 128)).value
    errs = [np.abs(rough_integral(Y, s, (0, 128), depth=k).value - full).max() for k in (1, 3, 5)]
    assert errs[0] > errs[1] > errs[2]


def test_integral_table_consistent_with_rough_integral():
    s = brownian(M=3, K=10, seed=7)
    Y = integrand(s, 2)
    I, G = integral_table(Y, s)
    r = rough_integral(Y, s, (2, 9))
    assert np.allclose(I[:, 2, 9], r.increment, atol=1e-13)
    assert np.allclose(G[:, 2, 9], r.germ, atol=1e-13)


def test_sewing_defect_rate_for_nonlinear_integrand():
    s = brownian(M=3, K=96, seed=8)
    w = build_control(s, s.p)
    rep = germ_diagnostics(integrand(s, 2), s, w, s.p)
    assert rep.decades >= 2
    assert rep.slope >= 3 / s.p - 0.1
    assert rep.max_ratio < np.inf


def test_sewing_defect_vanishes_for_linear_integrand():
    s = brownian(M=3, K=32, seed=9)
    w = build_control(s, s.p)
    rep = germ_diagnostics(integrand(s), s, w, s.p)
    assert rep.n_pairs == 0 and np.isnan(rep.slope)
