"""Run configuration: a flat JSON document with per-kind device blocks."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigError

KINDS = ("battery", "hvac", "ev")


@dataclass(frozen=True)
class KindConfig:
    interval: tuple[float, float]
    gamma_U: float
    L_U: float
    q: int = 10
    fd_step: float | None = None
    update_period: int = 1
    signal_variance: float | None = None
    length_scale: float | None = None

    def __post_init__(self):
        lo, hi = self.interval
        if not lo < hi:
            raise ConfigError(f"interval {self.interval} is empty")
        if not 0 < self.gamma_U < self.L_U:
            raise ConfigError(f"need 0 < gamma_U < L_U, got {self.gamma_U}, {self.L_U}")
        if self.q < 2:
            raise ConfigError("q must be >= 2")
        if self.update_period < 1:
            raise ConfigError("update_period must be >= 1")
        if self.fd_step is not None and not 0 < self.fd_step < (hi - lo) / 10:
            raise ConfigError(f"fd_step {self.fd_step} must lie in (0, width/10)")


def _default_kinds() -> dict[str, KindConfig]:
    return {
        "battery": KindConfig((-8.0, 8.0), 0.5, 4.0),
        "hvac": KindConfig((5.0, 15.0), 0.5, 4.0, update_period=12),
        "ev": KindConfig((7.0, 50.0), 0.1, 1.0),
    }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    horizon_steps: int = 8640
    step_seconds: float = 5.0
    counts: dict[str, int] = field(default_factory=lambda: {"battery": 15, "hvac": 10, "ev": 5})
    kinds: dict[str, KindConfig] = field(default_factory=_default_kinds)
    signal_variance: float = 1e4
    length_scale: float = 10.0
    noise_variance: float = 0.25
    prior_mean: float = 0.0
    beta: float = 1.0
    alpha: float | str = "auto"
    discomfort: str = "gp"
    feedback_period: int = 360
    feedback_noise_sd: float = 0.5
    feedback_location: str = "setpoint"
    prior_points: int = 5
    prior_noise_sd: float = 5.0
    prior_dir: str | None = None
    reference_levels: tuple[float, ...] = (290.0, 320.0, 270.0, 340.0, 300.0, 250.0, 310.0)
    reference_jump_steps: tuple[int, ...] | None = None
    loads_csv: str | None = None
    load_count: int = 20
    measurement_noise_sd: float = 0.0
    oracle_tol: float = 1e-9
    oracle_max_iter: int = 100_000
    output_dir: str = "out"

    def __post_init__(self):
        if self.horizon_steps < 0:
            raise ConfigError("horizon_steps must be >= 0")
        if not self.step_seconds > 0:
            raise ConfigError("step_seconds must be positive")
        for kind, n in self.counts.items():
            if kind not in KINDS:
                raise ConfigError(f"counts: unknown device kind {kind!r}")
            if n < 0:
                raise ConfigError(f"counts.{kind} must be >= 0")
        for kind in self.counts:
            if kind not in self.kinds:
                raise ConfigError(f"kinds: missing block for {kind!r}")
        for name in ("signal_variance", "length_scale", "beta", "oracle_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("noise_variance", "feedback_noise_sd", "prior_noise_sd", "measurement_noise_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                raise ConfigError(f"alpha must be a number or 'auto', got {self.alpha!r}")
        elif not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.discomfort not in ("gp", "exact"):
            raise ConfigError("discomfort must be 'gp' or 'exact'")
        if self.feedback_location not in ("setpoint", "random"):
            raise ConfigError("feedback_location must be 'setpoint' or 'random'")
        if self.feedback_period < 1:
            raise ConfigError("feedback_period must be >= 1")
        if self.prior_points < 0 or self.load_count < 0:
            raise ConfigError("prior_points and load_count must be >= 0")
        if self.discomfort == "gp" and self.prior_points == 0 and self.prior_dir is None:
            raise ConfigError("gp runs need prior points (prior_points > 0 or prior_dir)")
        if not self.reference_levels:
            raise ConfigError("reference_levels must not be empty")
        if self.reference_jump_steps is not None:
            js = self.reference_jump_steps
            if len(js) != len(self.reference_levels) - 1:
                raise ConfigError("reference_jump_steps needs len(reference_levels) - 1 entries")
            if any(b <= a for a, b in zip(js, js[1:])) or (js and js[0] < 1):
                raise ConfigError("reference_jump_steps must be increasing and >= 1")

    @property
    def M(self) -> int:
        return sum(self.counts.values())

    def jump_steps(self) -> list[int]:
        """Steps ``t`` at which the reference takes a new level."""
        if self.reference_jump_steps is not None:
            return list(self.reference_jump_steps)
        n = len(self.reference_levels)
        return [round(i * self.horizon_steps / n) for i in range(1, n)]

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["kinds"] = {k: dataclasses.asdict(v) for k, v in self.kinds.items()}
        for k, v in d["kinds"].items():
            v["interval"] = list(v["interval"])
        d["reference_levels"] = list(self.reference_levels)
        if self.reference_jump_steps is not None:
            d["reference_jump_steps"] = list(self.reference_jump_steps)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_KIND_FIELDS = {f.name for f in dataclasses.fields(KindConfig)}


def from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    data = dict(raw)
    if "kinds" in data:
        kinds = dict(_default_kinds())
        if not isinstance(data["kinds"], dict):
            raise ConfigError("kinds must be an object")
        for name, block in data["kinds"].items():
            if name not in KINDS:
                raise ConfigError(f"kinds: unknown device kind {name!r}")
            bad = sorted(set(block) - _KIND_FIELDS)
            if bad:
                raise ConfigError(f"kinds.{name}: unknown field(s) {', '.join(bad)}")
            base = dataclasses.asdict(kinds[name])
            base.update(block)
            base["interval"] = tuple(float(v) for v in base["interval"])
            try:
                kinds[name] = KindConfig(**base)
            except ConfigError as exc:
                raise ConfigError(f"kinds.{name}: {exc}") from None
            except TypeError as exc:
                raise ConfigError(f"kinds.{name}: {exc}") from None
        data["kinds"] = kinds
    if "counts" in data:
        data["counts"] = {k: int(v) for k, v in data["counts"].items()}
    for key in ("reference_levels", "reference_jump_steps"):
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None = None) -> RunConfig:
    """Parse a JSON config; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("sgpopgd").joinpath("data/default_config.json").read_text()
        where = "<bundled default_config.json>"
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        where = str(p)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
