import numpy as np
import pytest

from mfrough.errors import (
    ConfigError,
    InvalidParameterError,
    NonContractionError,
    NonFiniteStateError,
    UnsupportedDriverError,
)
from mfrough.fields import MeanFieldField, constant, make_field
from mfrough.rough_setup import DriverSpec, build_setup, setup_from_paths
from mfrough.solver import (
    SolveConfig,
    WindowPolicy,
    convergence_study,
    explicit_step_solve,
    mckean_vlasov_oracle,
    picard_solve,
    solve,
)
from mfrough.variation import TimeGrid


def brownian(M=4, K=16, d=1, seed=0, T=1.0, **kw):
    return build_setup(DriverSpec("brownian", d, seed, **kw), TimeGrid.uniform(T, K), M, cross_mode="on-demand")


def x0(M, d=1, seed=0):
    return 0.5 + 0.3 * np.random.default_rng(seed).standard_normal((M, d))


def test_config_validation():
    s = brownian()
    f = make_field("mean", 1)
    with pytest.raises(ConfigError):
        SolveConfig(f, s, np.zeros(3))
    with pytest.raises(ConfigError):
        SolveConfig(make_field("mean", 2), s, np.zeros((4, 2)))
    with pytest.raises(ConfigError):
        SolveConfig(f, s, np.zeros(4), scheme="rk4")
    with pytest.raises(ConfigError):
        WindowPolicy(kind="adaptive")
    with pytest.raises(ConfigError):
        WindowPolicy(L=0.0)


@pytest.mark.parametrize("scheme", ["explicit-step", "picard"])
def test_constant_field_is_exact(scheme):
    s = brownian(M=3, K=12, d=2, seed=1)
    f = constant(2, np.array([[1.0, 0.5], [0.0, 2.0]]))
    X0 = x0(3, 2)
    sol = solve(SolveConfig(f, s, X0, scheme=scheme))
    expected = X0[:, None] + np.einsum("aj,itj->ita", f.eval(X0, X0, s.weights)[0], s.level1)
    assert np.allclose(sol.X, expected, atol=1e-13)


@pytest.mark.parametrize("name", ["mean", "conv-kernel", "g-of-mean", "second-moment"])
@pytest.mark.parametrize("conv", ["stratonovich-linear", "ito-correction"])
def test_picard_fixed_point_equals_explicit_stepper(name, conv):
    s = brownian(M=6, K=24, seed=2, T=0.5, convention=conv)
    f = make_field(name, 1)
    X0 = x0(6)
    ex = explicit_step_solve(SolveConfig(f, s, X0))
    pc = picard_solve(SolveConfig(f, s, X0, scheme="picard"))
    assert np.allclose(pc.X, ex.X, atol=1e-12, rtol=1e-12)
    for rec in pc.diagnostics["windows"]:
        assert rec.residuals[-1] < 1e-10
        assert rec.certificate < 1e-9


def test_fixed_windows_cover_grid():
    s = brownian(M=3, K=10, seed=3)
    sol = picard_solve(SolveConfig(make_field("conv-kernel", 1), s, x0(3), scheme="picard",
                                   window_policy=WindowPolicy(kind="fixed", steps=4)))
    spans = [(r.lo, r.hi) for r in sol.diagnostics["windows"]]
    assert spans == [(0, 4), (4, 8), (8, 10)]


def test_non_contraction_raises_on_long_fixed_window():
    s = brownian(M=4, K=16, seed=0)
    cfg = SolveConfig(make_field("linear-x", 1, sigma=5.0), s, np.ones(4), scheme="picard",
                      window_policy=WindowPolicy(kind="fixed", steps=16))
    with pytest.raises(NonContractionError) as exc:
        picard_solve(cfg)
    assert len(exc.value.residuals) >= 4


def test_accumulation_windows_respect_threshold_when_longer_than_a_step():
    s = brownian(M=4, K=64, seed=4, T=0.25)
    sol = picard_solve(SolveConfig(make_field("mean", 1), s, x0(4), scheme="picard",
                                   window_policy=WindowPolicy(L=1.0, auto=False)))
    recs = sol.diagnostics["windows"]
    assert recs[0].lo == 0 and recs[-1].hi == 64
    for a, b in zip(recs[:-1], recs[1:]):
        assert a.hi == b.lo
    for r in recs:
        assert r.hi - r.lo == 1 or r.within_threshold


@pytest.mark.parametrize("name", ["mean", "g-of-mean", "conv-kernel"])
def test_permutation_equivariance(name):
    s = brownian(M=5, K=16, seed=5, convention="ito-correction")
    X0 = x0(5)
    perm = np.array([3, 0, 4, 1, 2])
    f = make_field(name, 1)
    a = explicit_step_solve(SolveConfig(f, s, X0)).X
    b = explicit_step_solve(SolveConfig(f, s.permuted(perm), X0[perm])).X
    assert np.allclose(b, a[perm], atol=1e-13)


def test_without_measure_dependence_particles_decouple():
    s = brownian(M=4, K=32, seed=6)
    X0 = x0(4)
    f = make_field("linear-x", 1, sigma=0.8)
    joint = explicit_step_solve(SolveConfig(f, s, X0)).X
    for i in range(4):
        alone = setup_from_paths(s.fine[i:i + 1], s.grid, p=s.p)
        single = explicit_step_solve(SolveConfig(f, alone, X0[i:i + 1])).X
        assert np.allclose(single[0], joint[i], atol=1e-14)


def test_mean_field_with_one_particle_sees_itself():
    # F(x, mu) = m(mu) with mu = delta_x is F = x: same as the linear field
    s = brownian(M=1, K=64, seed=7)
    X0 = np.array([[0.7]])
    a = explicit_step_solve(SolveConfig(make_field("mean", 1), s, X0)).X
    b = explicit_step_solve(SolveConfig(make_field("linear-x", 1), s, X0)).X
    assert np.allclose(a, b, atol=1e-14)


def test_linear_field_tracks_exponential():
    s = brownian(M=8, K=512, seed=8)
    X0 = x0(8)
    sol = explicit_step_solve(SolveConfig(make_field("linear-x", 1), s, X0))
    exact = X0 * np.exp(s.level1[:, -1])
    assert np.abs(sol.terminal() - exact).max() < 5e-3


def test_non_finite_state_reported():
    def ev(x, c, w):
        return (x ** 2)[:, :, None]

    def dx(x, c, w):
        return (2 * x)[:, :, None, None]

    def dmu(x, c, w, z):
        return np.zeros((len(x), len(z), 1, 1, 1))

    f = MeanFieldField("square", 1, 1, ev, dx, dmu, mean_field=False)
    s = brownian(M=2, K=8, seed=0)
    with pytest.raises(NonFiniteStateError) as exc, np.errstate(all="ignore"):
        explicit_step_solve(SolveConfig(f, s, np.full(2, 1e200)))
    assert exc.value.step == 0


def test_oracle_constant_field_reproduces_driver():
    s = brownian(M=3, K=8, seed=9)
    X0 = x0(3)
    out = mckean_vlasov_oracle(constant(1, 2.0), X0, s, substeps=4)
    assert np.allclose(out[..., 0], X0 + 2.0 * s.level1[..., 0], atol=1e-13)


def test_oracle_with_time_column():
    spec = DriverSpec("brownian", 1, 3, with_time=True)
    s = build_setup(spec, TimeGrid.uniform(1.0, 8), 3, cross_mode="on-demand")
    f = constant(1, np.array([[1.0, 2.0]]))
    X0 = x0(3)
    out = mckean_vlasov_oracle(f, X0, s, substeps=2)
    sol = explicit_step_solve(SolveConfig(f, s, X0))
    assert np.allclose(out, sol.X, atol=1e-13)
    assert np.allclose(out[:, -1, 0], X0[:, 0] + s.level1[:, -1, 0] + 2.0)


def test_oracle_stratonovich_matches_exponential():
    s = brownian(M=64, K=64, seed=10)
    X0 = x0(64)
    out = mckean_vlasov_oracle(make_field("linear-x", 1), X0, s, substeps=16, convention="stratonovich")
    exact = X0 * np.exp(s.level1[:, -1])
    assert np.sqrt(np.mean((out[:, -1] - exact) ** 2)) < 0.05


def test_oracle_rejects_non_brownian():
    g = TimeGrid.uniform(1.0, 4)
    s = build_setup(DriverSpec("fbm", 1, 0, hurst=0.4), g, 2, p=2.9)
    with pytest.raises(UnsupportedDriverError):
        mckean_vlasov_oracle(make_field("mean", 1), np.zeros(2), s)
    with pytest.raises(InvalidParameterError):
        mckean_vlasov_oracle(make_field("mean", 1), np.zeros(2), brownian(M=2), convention="backward")


def test_convergence_study_against_exact_solution():
    s = brownian(M=16, K=256, seed=11)
    X0 = x0(16)
    tab = convergence_study(make_field("linear-x", 1), X0, s, [8, 4, 2, 1], X0 * np.exp(s.level1[:, -1]))
    assert [r.K for r in tab.rows] == [256, 128, 64, 32]
    assert tab.strong_slope >= 0.9


def test_convergence_study_accepts_per_level_oracle():
    s = brownian(M=8, K=32, seed=12, convention="ito-correction")
    X0 = x0(8)
    f = make_field("mean", 1)
    seen = []

    def oracle(sc):
        seen.append(sc.n - 1)
        return mckean_vlasov_oracle(f, X0, sc, substeps=2)[:, -1]

    tab = convergence_study(f, X0, s, [4, 2, 1], oracle)
    assert sorted(seen) == [8, 16, 32]
    assert all(np.isfinite(r.strong) for r in tab.rows)
