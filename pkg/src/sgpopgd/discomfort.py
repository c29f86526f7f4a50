"""
Per-device discomfort estimation from sporadic user feedback.

A :class:`DiscomfortEstimator` owns one device's observations and its
shape-constrained GP model, and exposes the finite-difference gradient used
by the controller.  :class:`GpFleet` and :class:`QuadraticFleet` evaluate a
whole fleet at once (one numpy pass per call), which is what the simulator
and the oracle solvers use in their inner loops.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import NoModel, OutOfInterval, SchemaError
from .shape_gp import (
    ConstrainedGpModel,
    DerivativeGrid,
    GpPrior,
    ObservationSet,
    build_model,
)

Array = NDArray[np.float64]


def default_fd_step(lo: float, hi: float) -> float:
    return 1e-2 * (hi - lo)


class DiscomfortEstimator:
    """Shape-constrained GP estimate of one device's discomfort function.

    Parameters
    ----------
    device_id : int
    interval : (float, float)
        Feasible setpoint interval ``[lo, hi]``.
    prior : GpPrior
    grid : DerivativeGrid
        Virtual second-derivative points; usually uniform over ``interval``.
    fd_step : float, optional
        Finite-difference step ``delta``; defaults to 1% of the interval width.
    """

    def __init__(self, device_id: int, interval: tuple[float, float], prior: GpPrior,
                 grid: DerivativeGrid, fd_step: float | None = None):
        lo, hi = float(interval[0]), float(interval[1])
        if not lo < hi:
            raise ValueError(f"empty interval {interval}")
        self.device_id = device_id
        self.interval = (lo, hi)
        self.prior = prior
        self.grid = grid
        self.fd_step = default_fd_step(lo, hi) if fd_step is None else float(fd_step)
        if not 0 < self.fd_step < (hi - lo) / 10:
            raise ValueError(f"fd_step must lie in (0, width/10), got {self.fd_step}")
        self.obs = ObservationSet()
        self.model: ConstrainedGpModel | None = None

    @property
    def count(self) -> int:
        return self.obs.count

    def _check(self, x: float):
        lo, hi = self.interval
        if not lo <= x <= hi:
            raise OutOfInterval(f"device {self.device_id}: x={x} outside [{lo}, {hi}]")

    def load_prior(self, obs: ObservationSet) -> "DiscomfortEstimator":
        """Seed the estimator with prior samples (replaces nothing, appends)."""
        for x in obs.xs:
            self._check(x)
        noise = self.prior.kernel.noise_variance
        merged = self.obs
        nv = obs.noise_var
        for i, (x, z) in enumerate(zip(obs.xs, obs.zs)):
            merged = merged.added(x, z, None if nv is None else nv[i], default_noise_var=noise)
        self.obs = merged
        self.model = build_model(self.prior, self.obs, self.grid) if self.obs.count else None
        return self

    def ingest(self, x: float, z: float, noise_var: float | None = None) -> "DiscomfortEstimator":
        """Add one feedback sample ``z = U(x) + eps`` and refit."""
        x = float(x)
        self._check(x)
        self.obs = self.obs.added(x, float(z), noise_var,
                                  default_noise_var=self.prior.kernel.noise_variance)
        self.model = build_model(self.prior, self.obs, self.grid)
        return self

    def _require_model(self) -> ConstrainedGpModel:
        if self.model is None:
            raise NoModel(f"device {self.device_id} has no feedback or prior data yet")
        return self.model

    def estimate(self, x: ArrayLike):
        model = self._require_model()
        xa = np.asarray(x, dtype=float)
        lo, hi = self.interval
        if np.any(xa < lo) or np.any(xa > hi):
            raise OutOfInterval(f"device {self.device_id}: evaluation outside [{lo}, {hi}]")
        return model.mean(x)

    def gradient(self, x: ArrayLike):
        """Forward difference of the estimate; backward near the upper end."""
        model = self._require_model()
        xa = np.asarray(x, dtype=float)
        delta = self.fd_step
        fwd = xa + delta <= self.interval[1]
        hi_pt = np.where(fwd, xa + delta, xa)
        lo_pt = np.where(fwd, xa, xa - delta)
        g = (model.mean(hi_pt) - model.mean(lo_pt)) / delta
        return float(g) if xa.ndim == 0 else g

    def central_gradient(self, x: ArrayLike, h: float | None = None):
        """Reference derivative by central differences (default step ``delta/100``)."""
        model = self._require_model()
        h = self.fd_step / 100 if h is None else h
        xa = np.asarray(x, dtype=float)
        g = (model.mean(xa + h) - model.mean(xa - h)) / (2 * h)
        return float(g) if xa.ndim == 0 else g


def ingest_feedback(est: DiscomfortEstimator, x: float, z: float) -> DiscomfortEstimator:
    return est.ingest(x, z)


def estimate(est: DiscomfortEstimator, x: ArrayLike):
    return est.estimate(x)


def gradient(est: DiscomfortEstimator, x: ArrayLike):
    return est.gradient(x)


def read_prior_csv(path: str | Path) -> ObservationSet:
    """Read prior feedback pairs from a CSV with header ``x,z``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in ("x", "z") if c not in fields]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        xs, zs = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                xs.append(float(row["x"]))
                zs.append(float(row["z"]))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return ObservationSet(xs, zs)


def write_prior_csv(path: str | Path, obs: ObservationSet):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "z"])
        for x, z in zip(obs.xs, obs.zs):
            w.writerow([repr(x), repr(z)])


class _Fleet:
    """Vectorised discomfort for ``M`` devices; inputs have leading axis M."""

    lo: Array
    hi: Array
    fd_step: Array

    def value(self, X: ArrayLike) -> Array:
        raise NotImplementedError

    def total(self, x: ArrayLike) -> float:
        return float(np.sum(self.value(x)))

    def fd_gradient(self, x: ArrayLike) -> Array:
        x = np.asarray(x, dtype=float)
        fwd = x + self.fd_step <= self.hi
        pts = np.stack([np.where(fwd, x, x - self.fd_step),
                        np.where(fwd, x + self.fd_step, x)], axis=1)
        vals = self.value(pts)
        return (vals[:, 1] - vals[:, 0]) / self.fd_step

    def central_gradient(self, x: ArrayLike, h: ArrayLike | None = None) -> Array:
        x = np.asarray(x, dtype=float)
        h = self.fd_step / 100 if h is None else np.broadcast_to(h, x.shape)
        vals = self.value(np.stack([x - h, x + h], axis=1))
        return (vals[:, 1] - vals[:, 0]) / (2 * h)

    def exact_gradient(self, x: ArrayLike) -> Array:
        return self.central_gradient(x)


class GpFleet(_Fleet):
    """Packs the cached weights of several constrained GP models."""

    def __init__(self, estimators: Sequence[DiscomfortEstimator]):
        models = [e._require_model() for e in estimators]
        M = len(models)
        pmax = max(m.obs.count for m in models)
        qmax = max(m.grid.q for m in models)
        self.xs = np.zeros((M, pmax))
        self.wx = np.zeros((M, pmax))
        self.ds = np.zeros((M, qmax))
        self.wd = np.zeros((M, qmax))
        for i, m in enumerate(models):
            p, q = m.obs.count, m.grid.q
            self.xs[i, :p] = m.obs.xs
            self.wx[i, :p] = m.w_x
            self.ds[i, :q] = m.grid.ds
            self.wd[i, :q] = m.w_d
        self.mu = np.array([m.prior.mean for m in models])
        self.sf2 = np.array([m.prior.kernel.signal_variance for m in models])
        ell = np.array([m.prior.kernel.length_scale for m in models])
        self.inv2l2 = 0.5 / ell**2
        self.invl2 = 1.0 / ell**2
        self.lo = np.array([e.interval[0] for e in estimators])
        self.hi = np.array([e.interval[1] for e in estimators])
        self.fd_step = np.array([e.fd_step for e in estimators])
        self.gamma_U = np.array([m.grid.gamma_U for m in models])
        self.L_U = np.array([m.grid.L_U for m in models])

    def value(self, X: ArrayLike) -> Array:
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        Xc = X[:, :, None] if not squeeze else X[:, None, None]
        e_x = np.exp(-self.inv2l2[:, None, None] * (Xc - self.xs[:, None, :]) ** 2)
        r2 = self.invl2[:, None, None] * (Xc - self.ds[:, None, :]) ** 2
        e_d = np.exp(-0.5 * r2) * (r2 - 1.0) * self.invl2[:, None, None]
        out = self.mu[:, None] + self.sf2[:, None] * (
            np.einsum("mnp,mp->mn", e_x, self.wx) + np.einsum("mnq,mq->mn", e_d, self.wd))
        return out[:, 0] if squeeze else out


@dataclass
class QuadraticFleet(_Fleet):
    """Known quadratics ``a (x - c)^2``, used for exact-gradient runs."""

    a: Array
    c: Array
    lo: Array
    hi: Array
    fd_step: Array

    def value(self, X: ArrayLike) -> Array:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.a * (X - self.c) ** 2
        return self.a[:, None] * (X - self.c[:, None]) ** 2

    def fd_gradient(self, x: ArrayLike) -> Array:
        return self.exact_gradient(x)

    def exact_gradient(self, x: ArrayLike) -> Array:
        return 2.0 * self.a * (np.asarray(x, dtype=float) - self.c)
