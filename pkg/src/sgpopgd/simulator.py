"""
Neighbourhood-level demand-response simulation.

A fleet of batteries, HVAC units and EV chargers tracks an aggregate power
reference.  Each device's true discomfort is a quadratic ``a (x - c)^2`` that
the controller never sees; it only receives sporadic noisy feedback and the
aggregate power measurement.  Every step also solves the per-step problem to
convergence, both with the true discomforts and with the current estimates,
so that tracking and regret can be assessed afterwards.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .config import KINDS, KindConfig, RunConfig, _default_kinds
from .controller import (
    ControllerState,
    EngineeringCost,
    default_alpha,
    measurement_gradient,
    step,
    step_constants,
)
from .discomfort import DiscomfortEstimator, GpFleet, QuadraticFleet, read_prior_csv
from .errors import HorizonExceeded, SchemaError, SgpOpgdError, SimulationError
from .kernels import KernelSpec
from .shape_gp import DerivativeGrid, GpPrior, ObservationSet

log = logging.getLogger(__name__)

Array = NDArray[np.float64]

# Practical slack on the learned curvature bounds (shape holds only at grid resolution).
LEARNED_CURVATURE_SLACK = 1.1


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    kind: str
    interval: tuple[float, float]
    a: float
    c: float
    update_period: int
    gamma_U: float
    L_U: float

    def __post_init__(self):
        lo, hi = self.interval
        if not lo < self.c < hi:
            raise ValueError(f"device {self.id}: preferred point {self.c} not inside {self.interval}")
        if not self.a > 0:
            raise ValueError(f"device {self.id}: curvature must be positive")

    def discomfort(self, x: ArrayLike):
        return self.a * (np.asarray(x, dtype=float) - self.c) ** 2

    def discomfort_gradient(self, x: ArrayLike):
        return 2.0 * self.a * (np.asarray(x, dtype=float) - self.c)


def generate_fleet(seed, counts: dict[str, int] | Sequence[int] = (15, 10, 5),
                   kinds: dict[str, KindConfig] | None = None) -> list[DeviceSpec]:
    """Draw a fleet with preferred points in the middle 80% of each interval.

    ``counts`` is either a mapping kind -> count or a ``(battery, hvac, ev)``
    triple.  Curvatures ``2a`` are uniform on ``[gamma_U, L_U]`` of the kind.
    """
    kinds = _default_kinds() if kinds is None else kinds
    if not isinstance(counts, dict):
        counts = dict(zip(KINDS, counts))
    rng = np.random.default_rng(seed)
    fleet = []
    for kind in KINDS:
        n = int(counts.get(kind, 0))
        if n < 0:
            raise ValueError(f"negative count for {kind}")
        if n == 0:
            continue
        kc = kinds[kind]
        lo, hi = kc.interval
        w = hi - lo
        cs = rng.uniform(lo + 0.1 * w, hi - 0.1 * w, n)
        curv = rng.uniform(kc.gamma_U, kc.L_U, n)
        for c, cv in zip(cs, curv):
            fleet.append(DeviceSpec(len(fleet), kind, (lo, hi), 0.5 * float(cv), float(c),
                                    kc.update_period, kc.gamma_U, kc.L_U))
    return fleet


def synth_loads(seed, steps: int, W: int, step_seconds: float = 5.0,
                start_hour: float = 0.0) -> Array:
    """Synthetic non-controllable load profiles, shape ``(steps, W)`` in kW.

    Each load is a base level modulated by a diurnal curve (morning and
    evening peaks), a slow AR(1) wander, and a small per-step jitter,
    clamped at zero.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rng = np.random.default_rng(seed)
    if W == 0 or steps == 0:
        return np.zeros((steps, W))
    hours = start_hour + np.arange(steps) * step_seconds / 3600.0
    base = rng.uniform(0.5, 2.5, W)
    phase = rng.uniform(-1.0, 1.0, W)
    h = (hours[:, None] + phase[None, :]) % 24.0
    diurnal = (1.0 + 0.6 * np.exp(-0.5 * ((h - 8.0) / 1.5) ** 2)
               + 0.9 * np.exp(-0.5 * ((h - 19.0) / 2.0) ** 2)
               - 0.3 * np.exp(-0.5 * ((h - 3.0) / 2.0) ** 2))
    phi = np.exp(-step_seconds / 600.0)
    sd = 0.25
    innov = rng.normal(0.0, sd * np.sqrt(1 - phi * phi), (steps, W))
    wander = np.empty((steps, W))
    wander[0] = rng.normal(0.0, sd, W)
    for i in range(1, steps):
        wander[i] = phi * wander[i - 1] + innov[i]
    jitter = rng.normal(0.0, 0.01, (steps, W))
    return np.maximum(base * diurnal + wander + jitter, 0.0)


def write_loads_csv(path: str | Path, loads: Array, step_seconds: float = 5.0):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seconds"] + [f"load_{j + 1}" for j in range(loads.shape[1])])
        for i, row in enumerate(loads):
            w.writerow([repr(round(i * step_seconds, 9))] + [repr(float(v)) for v in row])


def _parse_time(token: str) -> float:
    try:
        return float(int(token))
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return datetime.fromisoformat(token.strip()).timestamp()


def read_loads_csv(path: str | Path, steps: int, step_seconds: float = 5.0) -> Array:
    """Load a trace (column 0 seconds or ISO-8601, then kW columns) onto the step grid.

    Times are taken relative to the first row and linearly interpolated; the
    last value is held beyond the end of the trace.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise SchemaError(f"{path}: need a header row and at least one data row")
    header, body = rows[0], rows[1:]
    W = len(header) - 1
    try:
        times = np.array([_parse_time(r[0]) for r in body])
        vals = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), W)
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if np.any(np.diff(times) <= 0):
        raise SchemaError(f"{path}: timestamps must be strictly increasing")
    grid = times[0] + np.arange(steps) * step_seconds
    out = np.empty((steps, W))
    for j in range(W):
        out[:, j] = np.interp(grid, times, vals[:, j])
    return out


@dataclass(frozen=True)
class NetworkModel:
    """Linear map ``y_t = A x_t + B w_t`` plus optional measurement noise."""

    A: Array
    B: Array
    w: Array  # (T+1, W), one row per step t = 0..T
    measurement_noise_sd: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        w = np.asarray(self.w, dtype=float)
        w = w.reshape(w.shape[0] if w.ndim == 2 else -1, B.shape[1])
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "w", w)
        if self.measurement_noise_sd < 0:
            raise ValueError("measurement noise must be nonnegative")

    @property
    def horizon(self) -> int:
        return self.w.shape[0] - 1

    def load_term(self, t: int) -> Array:
        if not 0 <= t < self.w.shape[0]:
            raise HorizonExceeded(f"step {t} outside load trace of {self.w.shape[0]} rows")
        return self.B @ self.w[t]

    def exact(self, x: ArrayLike, t: int) -> Array:
        return self.A @ np.asarray(x, dtype=float) + self.load_term(t)

    def measure_with_noise(self, x: ArrayLike, t: int, rng) -> tuple[Array, Array]:
        exact = self.exact(x, t)
        if self.measurement_noise_sd > 0:
            noise = rng.normal(0.0, self.measurement_noise_sd, exact.shape)
        else:
            noise = np.zeros_like(exact)
        return exact + noise, noise


def measure(net: NetworkModel, x: ArrayLike, t: int, rng=None) -> Array:
    """Noisy measurement of the network state under setpoints ``x``."""
    y, _ = net.measure_with_noise(x, t, rng)
    return y


def reference_trajectory(levels: Sequence[float], jump_steps: Sequence[int], horizon: int) -> Array:
    """Piecewise-constant reference over ``t = 0..horizon``."""
    ref = np.empty(horizon + 1)
    edges = [0] + list(jump_steps) + [horizon + 1]
    for lvl, a, b in zip(levels, edges, edges[1:]):
        ref[a:b] = lvl
    return ref


@dataclass
class OracleResult:
    x: Array
    iterations: int
    converged: bool


def projected_gradient(grad: Callable[[Array], Array], lo: Array, hi: Array, x0: ArrayLike,
                       step_size: float, tol: float = 1e-9, max_iter: int = 100_000,
                       momentum: float = 0.0) -> OracleResult:
    """Projected gradient until the step displacement drops below ``tol``.

    ``momentum > 0`` adds a constant heavy-ball extrapolation (Nesterov's
    scheme for strongly convex objectives) with gradient-based restart:
    whenever the last step points against the gradient-mapping direction,
    the momentum is dropped for one iteration.
    """
    x = np.minimum(np.maximum(np.asarray(x0, dtype=float), lo), hi)
    x_old = x
    for it in range(1, max_iter + 1):
        y = x + momentum * (x - x_old) if momentum else x
        x_new = np.minimum(np.maximum(y - step_size * grad(y), lo), hi)
        d = x_new - x
        if momentum and (y - x_new) @ d > 0:
            # restart from x without extrapolation
            x_old = x
            x_new = np.minimum(np.maximum(x - step_size * grad(x), lo), hi)
            d = x_new - x
        x_old, x = x, x_new
        if np.sqrt(d @ d) < tol:
            return OracleResult(x, it, True)
    return OracleResult(x, max_iter, False)


def oracle_solve(devices: Sequence[DeviceSpec], cost: EngineeringCost, t: int, Bw: ArrayLike,
                 fleet: GpFleet | QuadraticFleet | None = None, x0: ArrayLike | None = None,
                 tol: float = 1e-9, max_iter: int = 100_000) -> OracleResult:
    """Minimise ``sum U_m + C_t`` over the box by projected gradient.

    With ``fleet=None`` the true quadratic discomforts are used with their
    analytic gradients; otherwise the fleet's reference gradient is used
    (central differences at ``delta / 100`` for GP fleets).  Step size ``1/L`` and
    momentum ``(sqrt(k) - 1) / (sqrt(k) + 1)``, ``k = L / gamma``, use the
    strong-convexity and smoothness constants of the problem being solved.
    """
    lo = np.array([d.interval[0] for d in devices])
    hi = np.array([d.interval[1] for d in devices])
    Bw = np.asarray(Bw, dtype=float)
    A, beta = cost.A, cost.beta
    ref = cost.reference(t)
    c_lo, c_hi = cost.curvature_bounds()
    AtA = A.T @ A
    lin = A.T @ (Bw - ref)

    if fleet is None:
        two_a = np.array([2.0 * d.a for d in devices])
        cs = np.array([d.c for d in devices])
        gamma, L = float(two_a.min()) + c_lo, float(two_a.max()) + c_hi

        def grad(x):
            return two_a * (x - cs) + beta * (AtA @ x + lin)
    else:
        gamma = float(np.min(fleet_gamma(fleet, devices))) + c_lo
        L = LEARNED_CURVATURE_SLACK * float(np.max(fleet_L(fleet, devices))) + c_hi

        def grad(x):
            return fleet.exact_gradient(x) + beta * (AtA @ x + lin)

    if x0 is None:
        x0 = 0.5 * (lo + hi)
    rk = np.sqrt(L / gamma)
    return projected_gradient(grad, lo, hi, x0, 1.0 / L, tol, max_iter,
                              momentum=(rk - 1.0) / (rk + 1.0))


def fleet_gamma(fleet, devices):
    if isinstance(fleet, GpFleet):
        return fleet.gamma_U
    return np.array([d.gamma_U for d in devices])


def fleet_L(fleet, devices):
    if isinstance(fleet, GpFleet):
        return fleet.L_U
    return np.array([d.L_U for d in devices])


@dataclass
class RunLog:
    """Per-step record of a simulation; all arrays have leading length ``T``."""

    t: NDArray[np.int64]
    x: Array
    y_hat: Array
    noise: Array
    y: Array
    y_ref: Array
    w_agg: Array
    y_star: Array
    y_hat_star: Array
    f_t: Array
    f_t_star: Array
    f_true_star: Array
    x_star: Array
    xhat_star: Array
    e1_norm: Array
    e2_norm: Array
    e_norm: Array
    sup_err: Array
    feedback: NDArray[np.bool_]
    oracle_converged: NDArray[np.bool_]
    v: Array
    s: Array
    metadata: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.t.size)

    @property
    def M(self) -> int:
        return int(self.x.shape[1])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SGPOPGD_THREADS", "1")))
    except ValueError:
        return 1


def _build_estimators(cfg: RunConfig, devices: list[DeviceSpec], rng) -> list[DiscomfortEstimator]:
    ests = []
    for dev in devices:
        kc = cfg.kinds[dev.kind]
        spec = KernelSpec(
            kc.signal_variance if kc.signal_variance is not None else cfg.signal_variance,
            kc.length_scale if kc.length_scale is not None else cfg.length_scale,
            cfg.noise_variance,
        )
        lo, hi = dev.interval
        grid = DerivativeGrid.uniform(lo, hi, kc.q, kc.gamma_U, kc.L_U)
        ests.append(DiscomfortEstimator(dev.id, dev.interval, GpPrior(cfg.prior_mean, spec), grid,
                                        kc.fd_step))
    for dev, est in zip(devices, ests):
        # draw for every device even when a CSV overrides it, keeping streams aligned
        xs = np.linspace(*dev.interval, cfg.prior_points) if cfg.prior_points else np.empty(0)
        zs = dev.discomfort(xs) + rng.normal(0.0, cfg.prior_noise_sd, xs.size)
        csv_path = Path(cfg.prior_dir) / f"device_{dev.id}.csv" if cfg.prior_dir else None
        if csv_path is not None and csv_path.is_file():
            prior_obs = read_prior_csv(csv_path)
            nv = (cfg.prior_noise_sd**2,) * prior_obs.count
            prior_obs = ObservationSet(prior_obs.xs, prior_obs.zs, nv)
        else:
            prior_obs = ObservationSet(xs, zs, (cfg.prior_noise_sd**2,) * xs.size)
        if prior_obs.count:
            est.load_prior(prior_obs)
    return ests


def _sup_error(est: DiscomfortEstimator, dev: DeviceSpec, n: int = 200) -> float:
    g = np.linspace(*dev.interval, n)
    return float(np.max(np.abs(est.model.mean(g) - dev.discomfort(g))))


def run(cfg: RunConfig, progress: Callable[[int, int], None] | None = None) -> RunLog:
    """Simulate ``cfg.horizon_steps`` controller steps; deterministic given the seed."""
    T = cfg.horizon_steps
    ss = np.random.SeedSequence(cfg.seed)
    s_fleet, s_loads, s_prior, s_feedback, s_meas = ss.spawn(5)
    rng_prior = np.random.default_rng(s_prior)
    rng_fb = np.random.default_rng(s_feedback)
    rng_meas = np.random.default_rng(s_meas)

    devices = generate_fleet(s_fleet, cfg.counts, cfg.kinds)
    M = len(devices)
    if M == 0:
        raise SgpOpgdError("empty fleet")
    if cfg.loads_csv:
        w = read_loads_csv(cfg.loads_csv, T + 1, cfg.step_seconds)
    else:
        w = synth_loads(s_loads, T + 1, cfg.load_count, cfg.step_seconds)
    W = w.shape[1]
    net = NetworkModel(np.ones((1, M)), np.ones((1, W)), w, cfg.measurement_noise_sd)
    jumps = cfg.jump_steps()
    cost = EngineeringCost(cfg.beta, np.ones((1, M)),
                           reference_trajectory(cfg.reference_levels, jumps, T))

    lo = np.array([d.interval[0] for d in devices])
    hi = np.array([d.interval[1] for d in devices])
    gamma, L = step_constants([d.gamma_U for d in devices], [d.L_U for d in devices], cost)
    alpha = default_alpha(gamma, L) if cfg.alpha == "auto" else float(cfg.alpha)

    if cfg.discomfort == "gp":
        ests = _build_estimators(cfg, devices, rng_prior)
        fleet = GpFleet(ests)
        sup_err = max(_sup_error(e, d) for e, d in zip(ests, devices))
    else:
        ests = []
        fleet = QuadraticFleet(np.array([d.a for d in devices]), np.array([d.c for d in devices]),
                               lo, hi, np.array([
                                   cfg.kinds[d.kind].fd_step or 1e-2 * (d.interval[1] - d.interval[0])
                                   for d in devices]))
        sup_err = 0.0

    state = ControllerState(0.5 * (lo + hi), alpha, lo, hi, 0,
                            [d.update_period for d in devices])
    tol, cap = cfg.oracle_tol, cfg.oracle_max_iter
    Bw0 = net.load_term(0)
    xhat0 = oracle_solve(devices, cost, 0, Bw0, fleet, None, tol, cap)
    xtrue0 = oracle_solve(devices, cost, 0, Bw0, None, None, tol, cap)
    xhat_prev, xtrue_prev = xhat0.x, xtrue0.x

    cols = {name: np.zeros(T) for name in (
        "y_hat", "noise", "y", "y_ref", "w_agg", "y_star", "y_hat_star", "f_t", "f_t_star",
        "f_true_star", "e1_norm", "e2_norm", "e_norm", "sup_err")}
    X = np.zeros((T, M))
    Xs = np.zeros((T, M))
    Xh = np.zeros((T, M))
    V = np.zeros((T, M))
    Sg = np.zeros((T, M))
    fb_flags = np.zeros(T, dtype=bool)
    conv = np.ones(T, dtype=bool)
    not_converged = []
    pool = ThreadPoolExecutor(max_workers=_threads()) if _threads() > 1 else None

    try:
        for i, t in enumerate(range(1, T + 1)):
            try:
                x_prev = state.x
                Bw = net.load_term(t)
                y_hat, noise = net.measure_with_noise(x_prev, t, rng_meas)
                s_t = measurement_gradient(cost, y_hat, t)

                if ests and t % cfg.feedback_period == 0:
                    if cfg.feedback_location == "setpoint":
                        where = x_prev.copy()
                    else:
                        where = rng_fb.uniform(lo, hi)
                    fb_noise = rng_fb.normal(0.0, cfg.feedback_noise_sd, M)
                    zs = np.array([d.discomfort(xm) for d, xm in zip(devices, where)]) + fb_noise

                    def _ingest(j):
                        ests[j].ingest(where[j], zs[j])

                    if pool is None:
                        for j in range(M):
                            _ingest(j)
                    else:
                        list(pool.map(_ingest, range(M)))
                    fleet = GpFleet(ests)
                    sup_err = max(_sup_error(e, d) for e, d in zip(ests, devices))
                    fb_flags[i] = True

                v_t = fleet.fd_gradient(x_prev)
                state = step(state, v_t, s_t)

                hat = oracle_solve(devices, cost, t, Bw, fleet, xhat_prev, tol, cap)
                true = oracle_solve(devices, cost, t, Bw, None, xtrue_prev, tol, cap)
                if not (hat.converged and true.converged):
                    conv[i] = False
                    not_converged.append(t)
                xhat_prev, xtrue_prev = hat.x, true.x

                e1 = v_t - fleet.exact_gradient(x_prev)
                e2 = s_t - cost.gradient(x_prev, Bw, t)
                x = state.x
                ref = float(cost.reference(t)[0])
                cols["y_hat"][i] = y_hat[0]
                cols["noise"][i] = noise[0]
                cols["y"][i] = net.exact(x, t)[0]
                cols["y_ref"][i] = ref
                cols["w_agg"][i] = Bw[0]
                cols["y_star"][i] = net.exact(true.x, t)[0]
                cols["y_hat_star"][i] = net.exact(hat.x, t)[0]
                cols["f_t"][i] = fleet.total(x) + cost.value(x, Bw, t)
                cols["f_t_star"][i] = fleet.total(hat.x) + cost.value(hat.x, Bw, t)
                cols["f_true_star"][i] = (sum(float(d.discomfort(xm)) for d, xm in zip(devices, true.x))
                                          + cost.value(true.x, Bw, t))
                cols["e1_norm"][i] = np.linalg.norm(e1)
                cols["e2_norm"][i] = np.linalg.norm(e2)
                cols["e_norm"][i] = np.linalg.norm(e1 + e2)
                cols["sup_err"][i] = sup_err
                X[i], Xs[i], Xh[i], V[i], Sg[i] = x, true.x, hat.x, v_t, s_t
            except SgpOpgdError as exc:
                if isinstance(exc, SimulationError):
                    raise
                raise SimulationError(t, exc) from exc
            if progress is not None:
                progress(t, T)
    finally:
        if pool is not None:
            pool.shutdown()

    metadata = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "T": T,
        "M": M,
        "alpha": alpha,
        "gamma": gamma,
        "L": L,
        "x0": state_x0(lo, hi),
        "x0_star": xhat0.x.tolist(),
        "x0_star_true": xtrue0.x.tolist(),
        "jump_steps": [j for j in jumps if 1 <= j <= T],
        "feedback_steps": int(fb_flags.sum()),
        "oracle_initial_converged": bool(xhat0.converged and xtrue0.converged),
        "not_converged_steps": not_converged,
        "devices": [
            {"id": d.id, "kind": d.kind, "interval": list(d.interval), "a": d.a, "c": d.c,
             "update_period": d.update_period}
            for d in devices
        ],
        "feedback_counts": [e.count for e in ests],
    }
    return RunLog(t=np.arange(1, T + 1), x=X, x_star=Xs, xhat_star=Xh, feedback=fb_flags,
                  oracle_converged=conv, v=V, s=Sg, metadata=metadata, **cols)


def state_x0(lo: Array, hi: Array) -> list[float]:
    return (0.5 * (lo + hi)).tolist()
