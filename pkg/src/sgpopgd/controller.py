"""
Online projected gradient controller.

Each step combines the learned discomfort gradient ``v`` with the engineering
gradient ``s`` estimated from a network measurement, then projects every
coordinate back onto its interval::

    x_t = clip(x_{t-1} - alpha * (v + s), lo, hi)

Only the measurement enters ``s``; the non-controllable loads are never
needed on the controller side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, InvalidConstants

Array = NDArray[np.float64]


@dataclass(frozen=True)
class EngineeringCost:
    """Quadratic tracking cost ``beta/2 * ||A x + B w - y_ref(t)||^2``.

    ``y_ref`` is either an array indexed by step (shape ``(T+1,)`` or
    ``(T+1, S)``) or a callable ``t -> y_ref``.
    """

    beta: float
    A: Array
    y_ref: Array | Callable[[int], ArrayLike]

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "A", A)
        if not self.beta > 0:
            raise InvalidConstants(f"beta must be positive, got {self.beta}")
        if np.any(np.all(A == 0, axis=1)):
            raise InvalidConstants("A has a zero row")
        if not callable(self.y_ref):
            object.__setattr__(self, "y_ref", np.asarray(self.y_ref, dtype=float))

    @property
    def S(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.A.shape[1]

    def reference(self, t: int) -> Array:
        ref = self.y_ref(t) if callable(self.y_ref) else self.y_ref[t]
        return np.broadcast_to(np.asarray(ref, dtype=float), (self.S,))

    def value(self, x: ArrayLike, Bw: ArrayLike, t: int) -> float:
        r = self.A @ np.asarray(x, dtype=float) + np.asarray(Bw, dtype=float) - self.reference(t)
        return 0.5 * self.beta * float(r @ r)

    def gradient(self, x: ArrayLike, Bw: ArrayLike, t: int) -> Array:
        """Model-based gradient; needs the load term ``B w``."""
        r = self.A @ np.asarray(x, dtype=float) + np.asarray(Bw, dtype=float) - self.reference(t)
        return self.beta * (self.A.T @ r)

    def curvature_bounds(self) -> tuple[float, float]:
        """Extreme eigenvalues of ``beta A'A``."""
        ev = np.linalg.eigvalsh(self.A.T @ self.A)
        return self.beta * max(float(ev[0]), 0.0), self.beta * float(ev[-1])


def measurement_gradient(cost: EngineeringCost, y_hat: ArrayLike, t: int) -> Array:
    """``s_t = beta A' (y_hat - y_ref(t))`` from the measurement alone."""
    y_hat = np.atleast_1d(np.asarray(y_hat, dtype=float))
    if y_hat.shape != (cost.S,):
        raise DimensionMismatch(f"measurement has shape {y_hat.shape}, expected ({cost.S},)")
    return cost.beta * (cost.A.T @ (y_hat - cost.reference(t)))


def project(x: ArrayLike, interval) -> Array | float:
    """Euclidean projection onto ``[lo, hi]`` (clamp)."""
    lo, hi = interval
    out = np.minimum(np.maximum(x, lo), hi)
    return float(out) if np.ndim(out) == 0 else out


def default_alpha(gamma: float, L: float) -> float:
    if not (gamma > 0 and L > 0):
        raise InvalidConstants(f"gamma and L must be positive, got {gamma}, {L}")
    if gamma > L:
        raise InvalidConstants(f"gamma={gamma} exceeds L={L}")
    return 2.0 / (gamma + L)


def step_constants(gamma_U: ArrayLike, L_U: ArrayLike, cost: EngineeringCost) -> tuple[float, float]:
    """Fleet-wide strong convexity and smoothness of ``sum U_m + C_t``."""
    c_min, c_max = cost.curvature_bounds()
    return float(np.min(gamma_U)) + c_min, float(np.max(L_U)) + c_max


@dataclass(frozen=True)
class ControllerState:
    """Setpoints, step size and box for the next update.

    ``update_periods[m] = k`` means device ``m`` moves only on steps that are
    multiples of ``k``; in between its box is the singleton ``{x_m}``.
    """

    x: Array
    alpha: float
    lo: Array
    hi: Array
    t: int = 0
    update_periods: Array = field(default=None)

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        lo = np.broadcast_to(np.asarray(self.lo, dtype=float), x.shape).copy()
        hi = np.broadcast_to(np.asarray(self.hi, dtype=float), x.shape).copy()
        if np.any(lo > hi):
            raise ValueError("interval with lo > hi")
        periods = (np.ones(x.shape, dtype=int) if self.update_periods is None
                   else np.broadcast_to(np.asarray(self.update_periods, dtype=int), x.shape).copy())
        if np.any(periods < 1):
            raise ValueError("update periods must be >= 1")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        for name, val in (("x", x), ("lo", lo), ("hi", hi), ("update_periods", periods)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def M(self) -> int:
        return self.x.size

    def moving(self, t: int) -> NDArray[np.bool_]:
        return t % self.update_periods == 0


def step(state: ControllerState, v: ArrayLike, s: ArrayLike) -> ControllerState:
    """One projected-gradient update for step ``state.t + 1``."""
    v = np.asarray(v, dtype=float)
    s = np.asarray(s, dtype=float)
    if v.shape != state.x.shape or s.shape != state.x.shape:
        raise DimensionMismatch(f"gradients {v.shape}, {s.shape} vs setpoints {state.x.shape}")
    t = state.t + 1
    proposal = np.minimum(np.maximum(state.x - state.alpha * (v + s), state.lo), state.hi)
    x_new = np.where(state.moving(t), proposal, state.x)
    return replace(state, x=x_new, t=t)
