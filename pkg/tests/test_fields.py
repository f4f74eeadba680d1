import numpy as np
import pytest

from mfrough.controlled import lions_derivative_check
from mfrough.errors import ConfigError, UnsupportedFieldError
from mfrough.fields import BUILTINS, MeanFieldField, empirical_bounds, make_field, zero


@pytest.mark.parametrize("name", sorted(BUILTINS))
@pytest.mark.parametrize("d", [1, 2])
def test_builtin_derivatives(name, d):
    rng = np.random.default_rng(sorted(BUILTINS).index(name) * 10 + d)
    field = make_field(name, d)
    cloud = rng.standard_normal((6, d))
    w = rng.dirichlet(np.ones(6))
    rep = lions_derivative_check(field, cloud, rng.standard_normal(d), w)
    assert rep["pass"], rep


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_shapes(name):
    d, N, M, P = 2, 3, 5, 4
    f = make_field(name, d)
    x, cloud, z = np.ones((N, d)), np.zeros((M, d)), np.ones((P, d))
    w = np.full(M, 1 / M)
    assert f.eval(x, cloud, w).shape == (N, d, f.m)
    assert f.dx_eval(x, cloud, w).shape == (N, d, f.m, d)
    assert f.dmu_eval(x, cloud, w, z).shape == (N, P, d, f.m, d)
    assert f.dx_dmu(x, cloud, w, z).shape == (N, P, d, f.m, d, d)


def test_second_moment_lions_derivative_is_twice_z():
    f = make_field("second-moment", 1)
    z = np.linspace(-2, 2, 9)[:, None]
    D = f.dmu_eval(np.zeros((1, 1)), z, np.full(9, 1 / 9), z)
    assert np.allclose(D[0, :, 0, 0, 0], 2 * z[:, 0])


def test_check_reports_mismatches_for_wrong_derivative():
    good = make_field("mean", 1)
    bad = MeanFieldField("bad", 1, 1, good.eval, good.dx_eval,
                         lambda x, c, w, z: 2 * good.dmu_eval(x, c, w, z))
    rep = lions_derivative_check(bad, np.array([[0.1], [0.4]]), np.array([0.3]))
    assert not rep["pass"]
    assert not rep["dmu"]["pass"] and rep["dmu"]["mismatches"]


def test_make_field_errors():
    with pytest.raises(ConfigError):
        make_field("nope")
    with pytest.raises(ConfigError):
        make_field("mean", 1, bogus=3)


def test_require():
    f = MeanFieldField("f", 1, 1, lambda x, c, w: x[:, :, None])
    with pytest.raises(UnsupportedFieldError):
        f.require("dx_eval")


def test_zero_and_bounds():
    z = zero(2)
    assert not np.any(z.eval(np.ones((3, 2)), np.ones((3, 2)), np.full(3, 1 / 3)))
    b = empirical_bounds(make_field("conv-kernel", 1, sigma=2.0), [np.linspace(-1, 1, 5)[:, None]])
    assert b["F"] <= 2.0 + 1e-12
    assert b["dx"] > 0 and b["dmu_l2"] > 0
