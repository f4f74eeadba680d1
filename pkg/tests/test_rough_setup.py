import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfrough.errors import (
    ConfigError,
    GridIndexError,
    InvalidParameterError,
    MemoryBudgetError,
)
from mfrough.rough_setup import (
    DriverSpec,
    build_setup,
    chen_residual,
    covariance_rho_variation_check,
    lift_piecewise_linear,
    particle_rng,
    sample_gaussian_driver,
    setup_from_paths,
)
from mfrough.variation import TimeGrid

from oracles import iterated_integral_loop


def brownian(M=3, K=8, d=1, seed=0, **kw):
    return build_setup(DriverSpec("brownian", d, seed, **kw), TimeGrid.uniform(1.0, K), M, cross_mode="on-demand")


def test_driver_spec_validation():
    with pytest.raises(InvalidParameterError):
        DriverSpec("levy")
    with pytest.raises(InvalidParameterError):
        DriverSpec("fbm", hurst=0.3)
    with pytest.raises(ConfigError):
        DriverSpec("fbm", hurst=0.4, convention="ito-correction")
    with pytest.raises(ConfigError):
        DriverSpec("deterministic")
    with pytest.raises(ConfigError):
        DriverSpec("deterministic", dimension=2, path=np.zeros((3, 1)))


def test_p_range_checked():
    with pytest.raises(InvalidParameterError):
        build_setup(DriverSpec(), TimeGrid.uniform(1, 4), 2, p=3.0)
    with pytest.raises(InvalidParameterError):
        build_setup(DriverSpec("fbm", hurst=0.4), TimeGrid.uniform(1, 4), 2, p=2.4)


def test_particle_streams_do_not_depend_on_ensemble_size():
    g = TimeGrid.uniform(1.0, 16)
    small = sample_gaussian_driver(DriverSpec(seed=9), g, 3)
    large = sample_gaussian_driver(DriverSpec(seed=9), g, 7)
    assert np.array_equal(small, large[:3])
    other = sample_gaussian_driver(DriverSpec(seed=10), g, 3)
    assert not np.allclose(small, other)


def test_particle_rng_reproducible():
    a = particle_rng(5, 2).standard_normal(4)
    b = particle_rng(5, 2).standard_normal(4)
    assert np.array_equal(a, b)


def test_brownian_increment_statistics():
    g = TimeGrid.uniform(1.0, 4)
    W = sample_gaussian_driver(DriverSpec(seed=1), g, 20000)
    inc = np.diff(W[:, :, 0], axis=1)
    assert np.allclose(inc.var(axis=0), 0.25, rtol=0.05)
    assert abs(np.corrcoef(inc[:, 0], inc[:, 1])[0, 1]) < 0.03


def test_fbm_covariance_matches():
    spec = DriverSpec("fbm", 1, 4, hurst=0.4)
    g = TimeGrid.uniform(1.0, 4)
    W = sample_gaussian_driver(spec, g, 40000)[:, 1:, 0]
    emp = W.T @ W / W.shape[0]
    t = g.points[1:]
    assert np.allclose(emp, spec.covariance(t[:, None], t[None, :]), atol=0.02)


def test_fbm_h_one_is_linear_in_time():
    W = sample_gaussian_driver(DriverSpec("fbm", 1, 2, hurst=1.0), TimeGrid.uniform(1.0, 6), 3)
    t = np.linspace(0, 1, 7)
    for i in range(3):
        assert np.allclose(W[i, :, 0], W[i, -1, 0] * t, atol=1e-7)


def test_covariance_rho_variation():
    K, _ = covariance_rho_variation_check(DriverSpec(), TimeGrid.uniform(1.0, 6), 1.0)
    assert K == pytest.approx(1.0, rel=1e-12)
    spec = DriverSpec("fbm", hurst=0.4)
    K, _ = covariance_rho_variation_check(spec, TimeGrid.uniform(1.0, 6), spec.rho)
    assert np.isfinite(K) and K >= 1.0


def test_deterministic_identity_lift():
    g = TimeGrid.uniform(1.0, 10)
    s = build_setup(DriverSpec("deterministic", 1, path=g.points), g, 1)
    assert s.diag(0, 10)[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_lift_matches_quadrature():
    s = brownian(M=3, K=9, d=2, seed=4)
    W = s.fine
    for (a, b) in [(0, 9), (2, 5), (4, 5)]:
        for j in range(3):
            ref = iterated_integral_loop(W[j, a:b + 1], W[j, a:b + 1])
            assert np.allclose(s.diag(a, b)[j], ref, atol=1e-13)
            assert np.allclose(lift_piecewise_linear(W, (j, j), (a, b)), ref, atol=1e-13)
            for i in range(3):
                cross = iterated_integral_loop(W[j, a:b + 1], W[i, a:b + 1])
                assert np.allclose(s.cross_pair(a, b)[j, i], cross, atol=1e-13)


def test_shuffle_identity_geometric():
    s = brownian(M=2, K=12, d=3, seed=8)
    for (a, b) in [(0, 12), (3, 7)]:
        D = s.diag(a, b)
        inc = s.level1[:, b] - s.level1[:, a]
        assert np.allclose(D + np.swapaxes(D, 1, 2), np.einsum("ir,is->irs", inc, inc), atol=1e-13)


def test_ito_correction_on_diagonal_and_self_pair():
    strat = brownian(M=3, K=8, d=2, seed=2)
    ito = brownian(M=3, K=8, d=2, seed=2, convention="ito-correction")
    dt = 3 / 8
    corr = 0.5 * dt * np.eye(2)
    assert np.allclose(strat.diag(2, 5) - ito.diag(2, 5), corr[None], atol=1e-15)
    cs, ci = strat.cross_pair(2, 5), ito.cross_pair(2, 5)
    for j in range(3):
        for i in range(3):
            expected = corr if i == j else 0.0
            assert np.allclose(cs[j, i] - ci[j, i], expected, atol=1e-15)
        assert np.allclose(ci[j, j], ito.diag(2, 5)[j], atol=1e-14)


def test_cross_pair_row_and_col_selection():
    s = brownian(M=5, K=6, seed=1, convention="ito-correction")
    full = s.cross_pair(1, 4)
    rows, cols = np.array([4, 0, 2]), np.array([2, 3])
    assert np.allclose(s.cross_pair(1, 4, rows=rows, cols=cols), full[np.ix_(rows, cols)], atol=1e-15)


def test_cross_table_matches_pair():
    s = brownian(M=3, K=6, d=2, seed=5, convention="ito-correction")
    T = s.cross_table()
    for a in range(7):
        for b in range(a + 1, 7):
            assert np.allclose(T[:, :, a, b], s.cross_pair(a, b), atol=1e-13)


def test_cross_factors_reassemble_cross_level():
    s = brownian(M=4, K=8, d=2, seed=6).coarsen(2)
    A, dW = s.cross_factors(1, 3)
    assert np.allclose(np.einsum("jcr,ics->jirs", A, dW), s.cross_pair(1, 3), atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["stratonovich-linear", "ito-correction"]),
       st.integers(1, 4), st.integers(1, 2))
def test_chen_exact(seed, conv, M, d):
    s = brownian(M=M, K=10, d=d, seed=seed, convention=conv)
    res = chen_residual(s)
    assert max(res.values()) <= 1e-12


def test_chen_exact_fbm_and_coarsened():
    s = build_setup(DriverSpec("fbm", 2, 3, hurst=0.45), TimeGrid.uniform(1.0, 12), 3, cross_mode="on-demand")
    assert max(chen_residual(s).values()) <= 1e-12
    assert max(chen_residual(s.coarsen(3)).values()) <= 1e-12


def test_coarsen_keeps_fine_integrals():
    s = brownian(M=2, K=8, seed=3)
    c = s.coarsen(4)
    assert c.n == 3
    assert np.allclose(c.diag(0, 2), s.diag(0, 8), atol=1e-15)
    assert np.allclose(c.cross_pair(1, 2), s.cross_pair(4, 8), atol=1e-15)
    with pytest.raises(GridIndexError):
        s.coarsen(3)


def test_materialized_steps_and_budget():
    g = TimeGrid.uniform(1.0, 8)
    s = build_setup(DriverSpec(seed=1), g, 3, cross_mode="materialize-steps")
    for k in range(8):
        assert np.allclose(s.cross_step(k), s.cross_pair(k, k + 1))
    with pytest.raises(MemoryBudgetError) as exc:
        build_setup(DriverSpec(seed=1), g, 30, cross_mode="materialize-steps", memory_budget=1000)
    assert exc.value.required_bytes == 8 * 30 * 30 * 8


def test_permuted_relabels_particles():
    s = brownian(M=4, K=5, seed=2)
    perm = np.array([2, 0, 3, 1])
    p = s.permuted(perm)
    assert np.allclose(p.cross_pair(0, 5), s.cross_pair(0, 5)[np.ix_(perm, perm)])


def test_setup_from_paths_and_bad_pair():
    g = TimeGrid.uniform(1.0, 3)
    s = setup_from_paths(np.array([[0.0, 1.0, 0.0, 2.0]]), g)
    assert s.M == 1 and s.m == 1
    with pytest.raises(GridIndexError):
        s.diag(2, 1)
