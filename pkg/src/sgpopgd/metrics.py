"""
Tracking, path-length and regret diagnostics computed from a RunLog.

Everything here is a pure function of the logged arrays, so the report can
be regenerated offline from the CSV.  The comparison trajectory ``x*_t`` is
the minimiser of the learned objective ``f_t = sum U_hat_m + C_t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .controller import EngineeringCost
from .errors import InvalidStepSize

Array = NDArray[np.float64]

CONTRACTION_TOL = 1e-7
CUMULATIVE_TOL = 1e-7


@dataclass(frozen=True)
class MetricSeries:
    """Per-step diagnostics; index ``i`` holds step ``t = i + 1``."""

    tracking_error: Array  # ||x_t - x*_t||
    r: Array  # ||x*_{t-1} - x*_t||
    e1: Array
    e2: Array
    e: Array
    gap: Array  # f_t(x_t) - f_t(x*_t)
    initial_error: float  # ||x_0 - x*_0||

    @property
    def T(self) -> int:
        return int(self.gap.size)

    @property
    def regret_average(self) -> Array:
        return dynamic_regret(self)

    @property
    def signed_regret_average(self) -> Array:
        return _running_mean(self.gap)


def series_from_log(log) -> MetricSeries:
    meta = log.metadata
    M = int(meta.get("M", 0))
    T = log.T
    x0 = np.asarray(meta.get("x0", np.zeros(M)), dtype=float)
    x0s = np.asarray(meta.get("x0_star", np.zeros(M)), dtype=float)
    if T == 0:
        z = np.zeros(0)
        return MetricSeries(z, z, z, z, z, z, float(np.linalg.norm(x0 - x0s)))
    prev = np.vstack([x0s[None, :], log.xhat_star[:-1]])
    return MetricSeries(
        tracking_error=np.linalg.norm(log.x - log.xhat_star, axis=1),
        r=np.linalg.norm(prev - log.xhat_star, axis=1),
        e1=np.asarray(log.e1_norm, dtype=float),
        e2=np.asarray(log.e2_norm, dtype=float),
        e=np.asarray(log.e_norm, dtype=float),
        gap=np.asarray(log.f_t, dtype=float) - np.asarray(log.f_t_star, dtype=float),
        initial_error=float(np.linalg.norm(x0 - x0s)),
    )


def gradient_errors(v: ArrayLike, s: ArrayLike, x: ArrayLike, fleet, cost: EngineeringCost,
                    Bw: ArrayLike, t: int) -> tuple[Array, Array]:
    """Errors of the two gradient estimates at ``x``.

    ``e1 = v - grad U_hat(x)`` (reference by central differences at
    ``delta/100``, analytic for known quadratics) and
    ``e2 = s - grad C_t(x)`` (model gradient using the true loads).
    """
    e1 = np.asarray(v, dtype=float) - fleet.exact_gradient(x)
    e2 = np.asarray(s, dtype=float) - cost.gradient(x, Bw, t)
    return e1, e2


def contraction_factor(alpha: float, gamma: float, L: float) -> float:
    if not 0 < alpha < 2.0 / L:
        raise InvalidStepSize(f"alpha={alpha} outside (0, 2/L) = (0, {2.0 / L})")
    return max(abs(1 - alpha * gamma), abs(1 - alpha * L))


@dataclass(frozen=True)
class ContractionReport:
    rho: float
    slack: Array
    violations: int
    tolerance: float

    @property
    def violation_rate(self) -> float:
        return self.violations / self.slack.size if self.slack.size else 0.0


def contraction_check(series: MetricSeries, alpha: float, gamma: float, L: float,
                      tol: float = CONTRACTION_TOL) -> ContractionReport:
    """Slack of ``rho a_{t-1} + rho r_t + alpha e_t - a_t`` at every step."""
    rho = contraction_factor(alpha, gamma, L)
    if not rho < 1:
        raise InvalidStepSize(f"contraction factor {rho} is not < 1")
    a = series.tracking_error
    prev = np.concatenate([[series.initial_error], a[:-1]])
    slack = rho * prev + rho * series.r + alpha * series.e - a
    return ContractionReport(rho, slack, int(np.count_nonzero(slack < -tol)), tol)


def cumulative_bound(series: MetricSeries, alpha: float, gamma: float, L: float) -> tuple[float, float]:
    """Cumulative tracking error and its bound ``(rho a_0 + rho w_T + alpha E_T) / (1 - rho)``."""
    rho = contraction_factor(alpha, gamma, L)
    omega, E = path_metrics(series)
    lhs = float(np.sum(series.tracking_error))
    rhs = (rho * series.initial_error + rho * omega + alpha * E) / (1 - rho)
    return lhs, float(rhs)


def _running_mean(vals: Array) -> Array:
    if vals.size == 0:
        return np.zeros(0)
    return np.cumsum(vals) / np.arange(1, vals.size + 1)


def dynamic_regret(series: MetricSeries) -> Array:
    """Running average of ``|f_t(x_t) - f_t(x*_t)|`` for every prefix length."""
    return _running_mean(np.abs(series.gap))


def path_metrics(series: MetricSeries) -> tuple[float, float]:
    """Path length ``sum r_t`` and cumulative gradient error ``sum ||e_t||``."""
    return float(np.sum(series.r)), float(np.sum(series.e))


def increase_steps(avg: ArrayLike, t: ArrayLike | None = None, rel_tol: float = 1e-12) -> NDArray[np.int64]:
    """Steps where the running average strictly increases."""
    avg = np.asarray(avg, dtype=float)
    if avg.size < 2:
        return np.zeros(0, dtype=np.int64)
    t = np.arange(1, avg.size + 1) if t is None else np.asarray(t)
    up = avg[1:] > avg[:-1] + rel_tol * np.abs(avg[:-1])
    return t[1:][up].astype(np.int64)


def unexplained_increases(avg: ArrayLike, jump_steps, t: ArrayLike | None = None,
                          lag: int = 1) -> NDArray[np.int64]:
    """Increase steps farther than ``lag`` steps from every reference jump."""
    inc = increase_steps(avg, t)
    if not len(jump_steps):
        return inc
    jumps = np.asarray(jump_steps)
    near = np.min(np.abs(inc[:, None] - jumps[None, :]), axis=1) <= lag if inc.size else np.zeros(0, bool)
    return inc[~near]


def segment_tail_increases(avg: ArrayLike, jump_steps, T: int, tail: float = 0.8) -> dict[int, list[int]]:
    """Increase steps inside the final ``tail`` fraction of each jump-free segment.

    Returns ``{segment_start: [steps...]}`` with only offending segments.
    """
    inc = increase_steps(avg)
    edges = [1] + [j for j in jump_steps if 1 < j <= T] + [T + 1]
    bad = {}
    for a, b in zip(edges, edges[1:]):
        start = a + int(np.ceil((1 - tail) * (b - a)))
        hits = [int(s) for s in inc if start <= s < b]
        if hits:
            bad[a] = hits
    return bad


def report(log, regret_series_path: str | None = None) -> dict:
    """Summary used by the ``metrics`` CLI command."""
    meta = log.metadata
    series = series_from_log(log)
    alpha, gamma, L = float(meta["alpha"]), float(meta["gamma"]), float(meta["L"])
    try:
        rho = contraction_factor(alpha, gamma, L)
    except InvalidStepSize:
        rho = float("nan")
    omega, E = path_metrics(series)
    out = {
        "rho": rho,
        "omega_T": omega,
        "E_T": E,
        "corollary1_lhs": 0.0,
        "corollary1_rhs": 0.0,
        "contraction_violations": 0,
        "regret_final": 0.0,
        "regret_signed_final": 0.0,
        "regret_series_path": regret_series_path,
        "T": series.T,
    }
    if series.T and rho < 1:
        lhs, rhs = cumulative_bound(series, alpha, gamma, L)
        out["corollary1_lhs"], out["corollary1_rhs"] = lhs, rhs
        out["contraction_violations"] = contraction_check(series, alpha, gamma, L).violations
    if series.T:
        out["regret_final"] = float(dynamic_regret(series)[-1])
        out["regret_signed_final"] = float(series.signed_regret_average[-1])
    return out


def segments(jump_steps, T: int) -> list[tuple[int, int]]:
    """Jump-free step ranges ``[a, b)`` covering ``1..T``."""
    edges = [1] + [j for j in jump_steps if 1 < j <= T] + [T + 1]
    return [(a, b) for a, b in zip(edges, edges[1:]) if b > a]


@dataclass(frozen=True)
class TrackingReport:
    controller: float
    oracle: float
    per_segment: list[tuple[int, float, float]]  # (segment start, controller, oracle)

    @property
    def ratio(self) -> float:
        return self.controller / self.oracle if self.oracle > 0 else float("inf")


def tracking_quality(log, tail: float = 0.1) -> TrackingReport:
    """Mean ``|y_t - y_ref,t|`` over the last ``tail`` of every segment, controller vs learned oracle.

    The pooled averages run over the union of the tail windows.
    """
    T = log.T
    idx_all, per = [], []
    for a, b in segments(log.metadata.get("jump_steps", []), T):
        n = max(1, int(np.ceil(tail * (b - a))))
        idx = np.arange(b - n, b) - 1
        idx_all.append(idx)
        per.append((a, float(np.mean(np.abs(log.y[idx] - log.y_ref[idx]))),
                    float(np.mean(np.abs(log.y_hat_star[idx] - log.y_ref[idx])))))
    if not idx_all:
        return TrackingReport(0.0, 0.0, [])
    idx = np.concatenate(idx_all)
    return TrackingReport(float(np.mean(np.abs(log.y[idx] - log.y_ref[idx]))),
                          float(np.mean(np.abs(log.y_hat_star[idx] - log.y_ref[idx]))), per)


def sandwich_ratio(log) -> Array:
    """``|f_t(xhat*_t) - F_t(x*_t)| / (M sup|U_hat - U|)`` per step; at most 1 in theory.

    ``F_t`` is the true objective.  Both optimal values lie within
    ``M sup|U_hat - U|`` of each other because each minimiser is feasible
    for the other problem.
    """
    M = int(log.metadata["M"])
    gap = np.abs(np.asarray(log.f_t_star) - np.asarray(log.f_true_star))
    bound = M * np.asarray(log.sup_err)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(bound > 0, gap / bound, np.where(gap > 0, np.inf, 0.0))
