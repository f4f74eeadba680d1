"""Mean-field vector fields ``F(x, mu)`` evaluated against weighted point clouds.

Batched signatures, with ``x`` of shape (N, d), ``cloud`` (M, d), weights (M,)
and probe points ``z`` (P, d):

* ``eval(x, cloud, w)`` -> (N, d, m)
* ``dx_eval(x, cloud, w)`` -> (N, d, m, d), last axis the x-direction
* ``dmu_eval(x, cloud, w, z)`` -> (N, P, d, m, d), last axis the z-direction

Optional second derivatives (only used by the derivative checker):

* ``dx_dmu(x, cloud, w, z)`` -> (N, P, d, m, d_z, d_x), x-derivative of ``D_mu F``
* ``dmu_dx(x, cloud, w, z)`` -> (N, P, d, m, d_x, d_z), Lions derivative of ``dx F``

The builtins below are diagonal (``m = d`` and ``F^{a j} = 0`` for ``a != j``)
so that they make sense in any dimension.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, UnsupportedFieldError


@dataclass
class MeanFieldField:
    name: str
    d: int
    m: int
    eval: Callable
    dx_eval: Optional[Callable] = None
    dmu_eval: Optional[Callable] = None
    dx_dmu: Optional[Callable] = None
    dmu_dx: Optional[Callable] = None
    bound: float = np.inf
    mean_field: bool = True

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise UnsupportedFieldError(f"field {self.name!r} lacks {', '.join(missing)}")


def _eye(d):
    return np.eye(d)


def _diag_field(f):
    """(N, d) -> (N, d, d) with the vector on the diagonal."""
    return f[..., :, None] * np.eye(f.shape[-1])


def _diag3(g):
    """(..., d, d) matrix ``g[a, l]`` -> (..., d, d, d) tensor ``delta_{aj} g[a, l]``."""
    d = g.shape[-1]
    return np.eye(d)[..., None] * g[..., :, None, :]


def _mean(cloud, w):
    return w @ cloud


def constant(d=1, value=1.0):
    C = np.asarray(value, dtype=float)
    C = C * np.eye(d) if C.ndim == 0 else C.reshape(d, -1)
    m = C.shape[1]

    def ev(x, cloud, w):
        return np.broadcast_to(C, (len(x), d, m)).copy()

    def dx(x, cloud, w):
        return np.zeros((len(x), d, m, d))

    def dmu(x, cloud, w, z):
        return np.zeros((len(x), len(z), d, m, d))

    def second(x, cloud, w, z):
        return np.zeros((len(x), len(z), d, m, d, d))

    return MeanFieldField("constant", d, m, ev, dx, dmu, second, second, bound=float(np.abs(C).max()),
                          mean_field=False)


def linear_x(d=1, sigma=1.0):
    """``F(x, mu) = sigma diag(x)``: no measure dependence."""

    def ev(x, cloud, w):
        return sigma * _diag_field(x)

    def dx(x, cloud, w):
        return np.broadcast_to(sigma * _diag3(np.eye(d)), (len(x), d, d, d)).copy()

    def dmu(x, cloud, w, z):
        return np.zeros((len(x), len(z), d, d, d))

    def second(x, cloud, w, z):
        return np.zeros((len(x), len(z), d, d, d, d))

    return MeanFieldField("linear-x", d, d, ev, dx, dmu, second, second, mean_field=False)


def mean(d=1, sigma=1.0):
    """``F(x, mu) = sigma diag(int y mu(dy))``; ``D_mu F`` is constant in ``z``."""

    def ev(x, cloud, w):
        return np.broadcast_to(sigma * _diag_field(_mean(cloud, w)), (len(x), d, d)).copy()

    def dx(x, cloud, w):
        return np.zeros((len(x), d, d, d))

    def dmu(x, cloud, w, z):
        return np.broadcast_to(sigma * _diag3(np.eye(d)), (len(x), len(z), d, d, d))

    def second(x, cloud, w, z):
        return np.zeros((len(x), len(z), d, d, d, d))

    return MeanFieldField("mean", d, d, ev, dx, dmu, second, second)


def conv_kernel(d=1, sigma=1.0, length=1.0):
    """``F(x, mu) = sigma diag(int K(x - y) mu(dy)) 1`` with a Gaussian kernel ``K``.

    Every entry of the diagonal carries the same scalar convolution, so the
    field is bounded with all derivatives.
    """
    ell2 = length ** 2

    def kern(u):
        return np.exp(-0.5 * np.einsum("...l,...l->...", u, u) / ell2)

    def conv(x, cloud, w):
        u = x[:, None, :] - cloud[None, :, :]
        return kern(u) @ w

    def grad(x, cloud, w):
        u = x[:, None, :] - cloud[None, :, :]
        return -np.einsum("nj,njl,j->nl", kern(u), u, w) / ell2

    def ev(x, cloud, w):
        return sigma * conv(x, cloud, w)[:, None, None] * np.eye(d)

    def dx(x, cloud, w):
        return sigma * np.eye(d)[None, :, :, None] * grad(x, cloud, w)[:, None, None, :]

    def dmu(x, cloud, w, z):
        # d/dz K(x - z) = -K'(x - z) = K(u) u / ell^2
        u = x[:, None, :] - z[None, :, :]
        g = kern(u)[..., None] * u / ell2
        return sigma * np.eye(d)[None, None, :, :, None] * g[:, :, None, None, :]

    def hess(u):
        k = kern(u)[..., None, None]
        return k * (np.einsum("...a,...b->...ab", u, u) / ell2 ** 2 - np.eye(d) / ell2)

    def dx_dmu(x, cloud, w, z):
        # d_x of K(u) u / ell^2 = -Hess K(u), symmetric in (z, x) directions
        u = x[:, None, :] - z[None, :, :]
        h = -hess(u)
        return sigma * np.eye(d)[None, None, :, :, None, None] * h[:, :, None, None]

    def dmu_dx(x, cloud, w, z):
        # D_mu of dx F = d_z of sigma grad K(x - z) = -sigma Hess K(x - z)
        u = x[:, None, :] - z[None, :, :]
        h = -hess(u)
        return sigma * np.eye(d)[None, None, :, :, None, None] * h[:, :, None, None]

    return MeanFieldField("conv-kernel", d, d, ev, dx, dmu, dx_dmu, dmu_dx, bound=abs(sigma) * np.sqrt(d))


def g_of_mean(d=1, a=1.0, b=1.0):
    """``F(x, mu) = diag(x (a + b m(mu)))`` with ``m`` the mean, componentwise."""

    def ev(x, cloud, w):
        return _diag_field(x * (a + b * _mean(cloud, w))[None, :])

    def dx(x, cloud, w):
        g = np.broadcast_to(np.diag(a + b * _mean(cloud, w)), (len(x), d, d))
        return _diag3(g)

    def dmu(x, cloud, w, z):
        g = b * _diag_field(x)
        return np.broadcast_to(_diag3(g)[:, None], (len(x), len(z), d, d, d))

    def dx_dmu(x, cloud, w, z):
        out = np.zeros((len(x), len(z), d, d, d, d))
        for k in range(d):
            out[:, :, k, k, k, k] = b
        return out

    return MeanFieldField("g-of-mean", d, d, ev, dx, dmu, dx_dmu, dx_dmu)


def second_moment(d=1, sigma=1.0):
    """``F(x, mu) = sigma diag(int |y|^2 mu(dy)) 1``; ``D_mu F(z) = 2 sigma z``."""

    def ev(x, cloud, w):
        s = w @ np.einsum("jl,jl->j", cloud, cloud)
        return np.broadcast_to(sigma * s * np.eye(d), (len(x), d, d)).copy()

    def dx(x, cloud, w):
        return np.zeros((len(x), d, d, d))

    def dmu(x, cloud, w, z):
        return 2 * sigma * np.eye(d)[None, None, :, :, None] * z[None, :, None, None, :] * np.ones((len(x), 1, 1, 1, 1))

    def second(x, cloud, w, z):
        return np.zeros((len(x), len(z), d, d, d, d))

    return MeanFieldField("second-moment", d, d, ev, dx, dmu, second, second)


BUILTINS = {
    "constant": constant,
    "linear-x": linear_x,
    "mean": mean,
    "conv-kernel": conv_kernel,
    "g-of-mean": g_of_mean,
    "second-moment": second_moment,
}


def make_field(name, d=1, **params):
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ConfigError(f"unknown field {name!r}; builtins are {sorted(BUILTINS)}") from None
    try:
        return factory(d=d, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for field {name!r}: {exc}") from None


def zero(d=1, m=None):
    return constant(d, np.zeros((d, d if m is None else m)))


def empirical_bounds(field, clouds, weights=None):
    """Largest ``|F|``, ``|dx F|`` and weighted L^2 norm of ``D_mu F(x, mu)(.)`` over probe clouds.

    Each cloud is used both as the measure support and as the evaluation points.
    """
    field.require("dx_eval", "dmu_eval")
    out = {"F": 0.0, "dx": 0.0, "dmu_l2": 0.0}
    for cloud in clouds:
        cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
        w = np.full(len(cloud), 1.0 / len(cloud)) if weights is None else weights
        F = field.eval(cloud, cloud, w)
        out["F"] = max(out["F"], float(np.sqrt((F ** 2).sum(axis=(1, 2))).max()))
        D = field.dx_eval(cloud, cloud, w)
        out["dx"] = max(out["dx"], float(np.sqrt((D ** 2).sum(axis=(1, 2, 3))).max()))
        G = field.dmu_eval(cloud, cloud, w, cloud)
        l2 = np.sqrt((G ** 2).sum(axis=(2, 3, 4)) @ w)
        out["dmu_l2"] = max(out["dmu_l2"], float(l2.max()))
    return out
