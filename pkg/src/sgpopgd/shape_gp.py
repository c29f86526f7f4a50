"""
GP regression with box constraints on the second derivative.

The constrained posterior conditions the GP jointly on the noisy
observations ``z`` and on the values ``u2 = U''(d)`` at a fixed set of
virtual points ``d``.  ``u2`` itself is the MAP of the truncated normal
posterior of ``U''(d) | z`` restricted to ``[gamma_U, L_U]^q``.

All heavy linear algebra is done once in :func:`build_model`; evaluating the
mean afterwards is two kernel rows times cached weight vectors::

    mean(x) = mu + K(x, X) w_x + K20(x, d) w_d

Numerical regularisation: a jitter ``JITTER * signal_variance`` is added to
the observation noise and to the second-derivative prior covariance.  It is
applied consistently in every block so that plugging ``u2 = mu(d)`` into the
constrained mean reproduces the unconstrained posterior mean exactly (up to
rounding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import EmptyObservations, NotConverged, SingularCovariance
from .kernels import KernelSpec, k, k20, k22

JITTER = 1e-8

Array = NDArray[np.float64]


@dataclass(frozen=True)
class ObservationSet:
    """Noisy samples ``z_i = U(x_i) + eps_i`` of one device's discomfort.

    ``noise_var`` optionally carries a per-sample noise variance; when it is
    ``None`` the kernel's ``noise_variance`` applies to every sample.
    """

    xs: tuple[float, ...] = ()
    zs: tuple[float, ...] = ()
    noise_var: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "xs", tuple(float(v) for v in self.xs))
        object.__setattr__(self, "zs", tuple(float(v) for v in self.zs))
        if len(self.xs) != len(self.zs):
            raise ValueError(f"xs and zs differ in length ({len(self.xs)} vs {len(self.zs)})")
        if self.noise_var is not None:
            nv = tuple(float(v) for v in self.noise_var)
            if len(nv) != len(self.xs):
                raise ValueError("noise_var must match xs in length")
            if any(v < 0 for v in nv):
                raise ValueError("noise variances must be nonnegative")
            object.__setattr__(self, "noise_var", nv)

    @property
    def count(self) -> int:
        return len(self.xs)

    def __len__(self):
        return self.count

    def added(self, x: float, z: float, noise_var: float | None = None,
              default_noise_var: float | None = None) -> "ObservationSet":
        """Return a new set with one more sample appended."""
        if self.noise_var is None and noise_var is None:
            return ObservationSet(self.xs + (x,), self.zs + (z,))
        if noise_var is None:
            if default_noise_var is None:
                raise ValueError("a noise variance is needed for heteroscedastic sets")
            noise_var = default_noise_var
        if self.noise_var is None:
            if default_noise_var is None:
                raise ValueError("a default noise variance is needed to mix noise levels")
            old = (default_noise_var,) * self.count
        else:
            old = self.noise_var
        return ObservationSet(self.xs + (x,), self.zs + (z,), old + (noise_var,))

    def noise_vector(self, default: float) -> Array:
        if self.noise_var is None:
            return np.full(self.count, float(default))
        return np.asarray(self.noise_var, dtype=float)


@dataclass(frozen=True)
class DerivativeGrid:
    """Virtual points where ``gamma_U <= U'' <= L_U`` is imposed."""

    ds: tuple[float, ...]
    gamma_U: float
    L_U: float

    def __post_init__(self):
        ds = tuple(float(v) for v in self.ds)
        object.__setattr__(self, "ds", ds)
        if len(ds) < 2:
            raise ValueError("a derivative grid needs at least 2 points")
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError("grid points must be strictly increasing")
        if not (0 < self.gamma_U < self.L_U):
            raise ValueError(f"need 0 < gamma_U < L_U, got {self.gamma_U}, {self.L_U}")

    @classmethod
    def uniform(cls, lo: float, hi: float, q: int, gamma_U: float, L_U: float) -> "DerivativeGrid":
        return cls(tuple(np.linspace(lo, hi, q)), gamma_U, L_U)

    @property
    def q(self) -> int:
        return len(self.ds)


@dataclass(frozen=True)
class GpPrior:
    mean: float = 0.0
    kernel: KernelSpec = field(default_factory=KernelSpec)


def _chol(mat: Array, what: str):
    try:
        return cho_factor(mat, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise SingularCovariance(f"{what} is not positive definite: {exc}") from exc


def _noisy_gram(prior: GpPrior, obs: ObservationSet) -> tuple[Array, Array]:
    spec = prior.kernel
    x = np.asarray(obs.xs)
    jitter = JITTER * spec.signal_variance
    noise = obs.noise_vector(spec.noise_variance) + jitter
    return k(spec, x[:, None], x[None, :]) + np.diag(noise), x


def standard_posterior(prior: GpPrior, obs: ObservationSet, x0: ArrayLike):
    """Unconstrained GP posterior mean and variance at ``x0``.

    Returns ``(mean, variance)``; both are scalars for scalar input.
    """
    if obs.count == 0:
        raise EmptyObservations("standard posterior needs at least one observation")
    spec = prior.kernel
    Kn, x = _noisy_gram(prior, obs)
    fac = _chol(Kn, "K + noise")
    resid = np.asarray(obs.zs) - prior.mean
    pts = np.atleast_1d(np.asarray(x0, dtype=float))
    kx = k(spec, pts[:, None], x[None, :])
    mean = prior.mean + kx @ cho_solve(fac, resid)
    var = spec.signal_variance - np.einsum("ij,ji->i", kx, cho_solve(fac, kx.T))
    var = np.maximum(var, 0.0)
    if np.ndim(x0) == 0:
        return float(mean[0]), float(var[0])
    return mean, var


def truncated_normal_map(mean: ArrayLike, cov: ArrayLike, lo: float, hi: float,
                         max_iter: int | None = None) -> Array:
    """
    Mode of ``N(mean, cov)`` restricted to the box ``[lo, hi]^q``.

    Solves ``min (u - mean)' cov^-1 (u - mean)`` subject to the box with a
    primal active-set method.  For a fixed working set the free coordinates
    are given by Gaussian conditioning on the bound ones, so ``cov`` is never
    inverted as a whole.  Exact up to rounding (finite termination).
    """
    m = np.asarray(mean, dtype=float)
    D = np.asarray(cov, dtype=float)
    q = m.size
    if D.shape != (q, q):
        raise ValueError(f"covariance shape {D.shape} does not match mean length {q}")
    if not lo < hi:
        raise ValueError("need lo < hi")
    if max_iter is None:
        max_iter = 50 * q + 50
    scale = max(1.0, abs(lo), abs(hi))
    ftol = 1e-12 * scale

    u = np.clip(m, lo, hi)
    active = (m < lo) | (m > hi)

    def conditional(act):
        if not act.any():
            return m.copy(), np.zeros(q)
        fac = _chol(D[np.ix_(act, act)], "truncated-normal covariance block")
        c_act = cho_solve(fac, u[act] - m[act])
        cand = u.copy()
        free = ~act
        cand[free] = m[free] + D[np.ix_(free, act)] @ c_act
        grad = np.zeros(q)
        grad[act] = c_act
        return cand, grad

    for _ in range(max_iter):
        cand, grad = conditional(active)
        free = ~active
        below = free & (cand < lo - ftol)
        above = free & (cand > hi + ftol)
        if not (below.any() or above.any()):
            u = np.clip(cand, lo, hi)
            # grad = cov^-1 (u - mean); KKT needs >= 0 at lo and <= 0 at hi
            at_lo = active & (u <= lo)
            at_hi = active & (u >= hi)
            gscale = 1e-12 * max(1.0, float(np.max(np.abs(grad))))
            viol = np.zeros(q)
            viol[at_lo] = np.maximum(-grad[at_lo] - gscale, 0.0)
            viol[at_hi] = np.maximum(grad[at_hi] - gscale, 0.0)
            if not viol.any():
                return u
            active[int(np.argmax(viol))] = False
            continue
        # move toward the candidate until the first free coordinate hits a bound
        step = cand - u
        ratios = np.full(q, np.inf)
        up = free & (step > 0)
        dn = free & (step < 0)
        ratios[up] = (hi - u[up]) / step[up]
        ratios[dn] = (lo - u[dn]) / step[dn]
        j = int(np.argmin(ratios))
        t = min(1.0, max(0.0, float(ratios[j])))
        u = u + t * step
        u[j] = hi if step[j] > 0 else lo
        u = np.clip(u, lo, hi)
        active[j] = True
    raise NotConverged(f"active-set solver did not terminate in {max_iter} iterations")


def _derivative_posterior(prior: GpPrior, obs: ObservationSet, grid: DerivativeGrid):
    """Posterior mean ``mu(d)`` and covariance ``D(d, d)`` of ``U''(d) | z``."""
    if obs.count == 0:
        raise EmptyObservations("derivative posterior needs at least one observation")
    spec = prior.kernel
    Kn, x = _noisy_gram(prior, obs)
    fac = _chol(Kn, "sigma^2 I + K(x, x)")
    d = np.asarray(grid.ds)
    K20 = k20(spec, x[:, None], d[None, :])  # cov(U(x_i), U''(d_j)), p x q
    K22 = k22(spec, d[:, None], d[None, :]) + JITTER * spec.signal_variance * np.eye(d.size)
    resid = np.asarray(obs.zs) - prior.mean
    mu_d = K20.T @ cho_solve(fac, resid)
    D = K22 - K20.T @ cho_solve(fac, K20)
    D = 0.5 * (D + D.T)
    return mu_d, D


def infer_u2(prior: GpPrior, obs: ObservationSet, grid: DerivativeGrid) -> Array:
    """MAP estimate of the box-truncated posterior of ``U''(d)``."""
    mu_d, D = _derivative_posterior(prior, obs, grid)
    return truncated_normal_map(mu_d, D, grid.gamma_U, grid.L_U)


@dataclass(frozen=True, eq=False)
class ConstrainedGpModel:
    """Shape-constrained posterior for one device; immutable once built.

    Block matrices follow the usual naming: ``A1 = K02(x,d) K22^-1``,
    ``B1 = noise + K(x,x) - K02(x,d) K22^-1 K20(d,x)``, and so on.
    """

    prior: GpPrior
    obs: ObservationSet
    grid: DerivativeGrid
    u2: Array
    mu_d: Array
    D: Array
    A1: Array
    B1: Array
    w_x: Array
    w_d: Array
    _K22_fac: tuple = field(repr=False)
    _B1_fac: tuple = field(repr=False)
    _G: Array = field(repr=False)  # K22^-1 K20(d, x), q x p

    def mean(self, x0: ArrayLike):
        """Constrained posterior mean; scalar in, scalar out."""
        spec = self.prior.kernel
        pts = np.asarray(x0, dtype=float)
        flat = np.atleast_1d(pts).ravel()
        x = np.asarray(self.obs.xs)
        d = np.asarray(self.grid.ds)
        out = (self.prior.mean
               + k(spec, flat[:, None], x[None, :]) @ self.w_x
               + k20(spec, flat[:, None], d[None, :]) @ self.w_d)
        if pts.ndim == 0:
            return float(out[0])
        return out.reshape(pts.shape)

    def variance(self, x0: ArrayLike):
        """Posterior variance ``B2 - B3 B1^-1 B3'`` given ``U''(d)``, clamped at 0."""
        spec = self.prior.kernel
        pts = np.asarray(x0, dtype=float)
        flat = np.atleast_1d(pts).ravel()
        x = np.asarray(self.obs.xs)
        d = np.asarray(self.grid.ds)
        Kxd = k20(spec, flat[:, None], d[None, :])
        B2 = spec.signal_variance - np.einsum("ij,ji->i", Kxd, cho_solve(self._K22_fac, Kxd.T))
        B3 = k(spec, flat[:, None], x[None, :]) - Kxd @ self._G
        A = B2 - np.einsum("ij,ji->i", B3, cho_solve(self._B1_fac, B3.T))
        A = np.maximum(A, 0.0)
        if pts.ndim == 0:
            return float(A[0])
        return A.reshape(pts.shape)


def build_model(prior: GpPrior, obs: ObservationSet, grid: DerivativeGrid,
                u2: ArrayLike | None = None) -> ConstrainedGpModel:
    """Compute and cache every block of the constrained posterior.

    ``u2`` overrides the MAP second-derivative values; it exists for
    diagnostics (e.g. plugging in the unconstrained ``mu(d)``).
    """
    if obs.count == 0:
        raise EmptyObservations("cannot build a model without observations")
    spec = prior.kernel
    jitter = JITTER * spec.signal_variance
    x = np.asarray(obs.xs)
    d = np.asarray(grid.ds)
    mu_d, D = _derivative_posterior(prior, obs, grid)
    if u2 is None:
        u2 = truncated_normal_map(mu_d, D, grid.gamma_U, grid.L_U)
    else:
        u2 = np.asarray(u2, dtype=float)
        if u2.shape != (grid.q,):
            raise ValueError(f"u2 must have length {grid.q}")

    K22 = k22(spec, d[:, None], d[None, :]) + jitter * np.eye(d.size)
    K22_fac = _chol(K22, "K22(d, d)")
    K20 = k20(spec, x[:, None], d[None, :])
    G = cho_solve(K22_fac, K20.T)  # q x p
    A1 = G.T
    noise = obs.noise_vector(spec.noise_variance) + jitter
    B1 = k(spec, x[:, None], x[None, :]) - K20 @ G + np.diag(noise)
    B1 = 0.5 * (B1 + B1.T)
    B1_fac = _chol(B1, "B1(x, d)")
    resid = np.asarray(obs.zs) - prior.mean
    w_x = cho_solve(B1_fac, resid - A1 @ u2)
    w_d = cho_solve(K22_fac, u2 - K20.T @ w_x)
    return ConstrainedGpModel(
        prior=prior, obs=obs, grid=grid, u2=u2, mu_d=mu_d, D=D, A1=A1, B1=B1,
        w_x=w_x, w_d=w_d, _K22_fac=K22_fac, _B1_fac=B1_fac, _G=G,
    )


def constrained_mean(model: ConstrainedGpModel, x0: ArrayLike):
    return model.mean(x0)


def constrained_variance(model: ConstrainedGpModel, x0: ArrayLike):
    return model.variance(x0)
