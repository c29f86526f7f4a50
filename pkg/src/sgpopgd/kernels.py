"""
Squared-exponential covariance and its second-derivative covariances.

All functions broadcast over numpy arrays, so ``k(spec, xs[:, None], ys[None, :])``
produces a full cross-covariance block.  Inputs are univariate.

    k(x, x')   = sf2 * exp(-r^2 / (2 l^2)),               r = x - x'
    k02(x, x') = cov[U''(x), U(x')]   = d^2 k / dx^2
    k22(x, x') = cov[U''(x), U''(x')] = d^4 k / dx^2 dx'^2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray


@dataclass(frozen=True)
class KernelSpec:
    """SE hyperparameters plus the observation noise variance."""

    signal_variance: float = 1.0
    length_scale: float = 10.0
    noise_variance: float = 0.25

    def __post_init__(self):
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be > 0, got {self.signal_variance}")
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be > 0, got {self.length_scale}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")


def _scaled_r2(spec: KernelSpec, x: ArrayLike, xp: ArrayLike):
    r = np.subtract(x, xp, dtype=float)
    return (r * r) / (spec.length_scale**2)


def k(spec: KernelSpec, x: ArrayLike, xp: ArrayLike):
    """SE covariance between U(x) and U(x')."""
    return spec.signal_variance * np.exp(-0.5 * _scaled_r2(spec, x, xp))


def k02(spec: KernelSpec, x: ArrayLike, xp: ArrayLike):
    """Covariance between U''(x) and U(x')."""
    s = _scaled_r2(spec, x, xp)
    l2 = spec.length_scale**2
    return spec.signal_variance * np.exp(-0.5 * s) * (s - 1.0) / l2


def k20(spec: KernelSpec, x: ArrayLike, xp: ArrayLike):
    """Covariance between U(x) and U''(x'); equals ``k02(spec, xp, x)``."""
    return k02(spec, xp, x)


def k22(spec: KernelSpec, x: ArrayLike, xp: ArrayLike):
    """Covariance between U''(x) and U''(x')."""
    s = _scaled_r2(spec, x, xp)
    l4 = spec.length_scale**4
    return spec.signal_variance * np.exp(-0.5 * s) * (s * s - 6.0 * s + 3.0) / l4


_BLOCKS = {"K": k, "K02": k02, "K20": k20, "K22": k22}


def gram(
    spec: KernelSpec,
    points: ArrayLike,
    which: Literal["K", "K02", "K20", "K22"] = "K",
    others: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """
    Assemble a covariance block ``[f(points_i, others_j)]``.

    With ``others`` omitted the block is square over ``points``; ``K`` and
    ``K22`` are then symmetric and ``K`` is positive semidefinite.
    """
    try:
        fn = _BLOCKS[which]
    except KeyError:
        raise ValueError(f"unknown block {which!r}; expected one of {sorted(_BLOCKS)}") from None
    a = np.atleast_1d(np.asarray(points, dtype=float))
    b = a if others is None else np.atleast_1d(np.asarray(others, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("gram requires nonempty point lists")
    return fn(spec, a[:, None], b[None, :])
