"""
Command-line entry point.

Exit codes: 0 on success, 2 when an oracle solve hit its iteration cap
(outputs are still written), 1 on any error.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, SgpOpgdError
from .kernels import KernelSpec
from .shape_gp import DerivativeGrid, GpPrior, ObservationSet, build_model, standard_posterior

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

DEMO_P = (3, 7, 21)
DEMO_GRID = 200


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_ERROR)


def _resolve(config: str | None, seed: int | None, out: str | None, alpha: str | None,
             horizon: int | None) -> RunConfig:
    cfg = load_config(config)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["output_dir"] = out
    if alpha is not None:
        if alpha == "auto":
            changes["alpha"] = "auto"
        else:
            try:
                changes["alpha"] = float(alpha)
            except ValueError:
                raise ConfigError(f"--alpha: expected a number or 'auto', got {alpha!r}") from None
    if horizon is not None:
        changes["horizon_steps"] = horizon
    return cfg.replace(**changes) if changes else cfg


def _common(f):
    f = click.option("--horizon", type=int, default=None, help="Number of controller steps.")(f)
    f = click.option("--alpha", type=str, default=None, help="Step size or 'auto'.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(f)
    f = click.option("--seed", type=int, default=None, help="Override the config seed.")(f)
    f = click.option("--config", "config", type=str, default=None,
                     help="JSON config file (default: bundled config).")(f)
    return f


@click.group()
@click.version_option(package_name="sgpopgd")
def main():
    """Shape-constrained GP demand-response simulator."""


@main.command("run")
@_common
@click.option("--quiet", is_flag=True, help="No progress output.")
def cmd_run(config, seed, out, alpha, horizon, quiet):
    """Run the closed-loop simulation and write the run log."""
    from .runlog import write_runlog
    from .simulator import run

    try:
        cfg = _resolve(config, seed, out, alpha, horizon)
        every = max(cfg.horizon_steps // 20, 1)

        def progress(t, T):
            if t % every == 0 or t == T:
                click.echo(f"step {t}/{T}", err=True)

        log = run(cfg, None if quiet else progress)
        csv_path, json_path = write_runlog(log, cfg.output_dir)
    except SgpOpgdError as exc:
        _fail(str(exc))
    click.echo(f"wrote {csv_path} ({log.T} rows) and {json_path}")
    bad = log.metadata["not_converged_steps"]
    if bad or not log.metadata["oracle_initial_converged"]:
        click.echo(f"warning: oracle did not converge at {len(bad)} step(s)", err=True)
        sys.exit(EXIT_NOT_CONVERGED)


@main.command("metrics")
@click.argument("runlog", type=str)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Metrics JSON path (default: next to the run log).")
def cmd_metrics(runlog, out):
    """Compute tracking and regret metrics for a run log CSV."""
    from . import metrics
    from .runlog import read_runlog

    try:
        log = read_runlog(runlog)
        series = metrics.series_from_log(log)
        base = Path(runlog)
        regret_path = base.with_name(base.stem + "_regret.csv")
        with regret_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "regret_avg", "regret_signed_avg"])
            for t, a, sgn in zip(log.t, series.regret_average, series.signed_regret_average):
                w.writerow([int(t), repr(float(a)), repr(float(sgn))])
        rep = metrics.report(log, str(regret_path))
    except SgpOpgdError as exc:
        _fail(str(exc))
    out_path = Path(out) if out else base.with_name(base.stem + "_metrics.json")
    out_path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    click.echo(f"rho={rep['rho']:.6g} omega_T={rep['omega_T']:.6g} "
               f"E_T={rep['E_T']:.6g} regret_final={rep['regret_final']:.6g}")
    click.echo(f"wrote {out_path}")


def fit_demo_rows(cfg: RunConfig, p_values=DEMO_P, n_grid: int = DEMO_GRID) -> list[list[float]]:
    """Standard vs shape-constrained fits of ``U(x) = 0.5 (x - 2)^2`` on the battery interval.

    Sample locations are uniform on the interval; noise has the configured
    feedback standard deviation.  Returns rows
    ``[p, x, U, standard_mean, constrained_mean, lower, upper]``.
    """
    kind = cfg.kinds["battery"]
    lo, hi = kind.interval
    spec = KernelSpec(kind.signal_variance or cfg.signal_variance,
                      kind.length_scale or cfg.length_scale, cfg.noise_variance)
    prior = GpPrior(cfg.prior_mean, spec)
    grid = DerivativeGrid.uniform(lo, hi, kind.q, kind.gamma_U, kind.L_U)
    rng = np.random.default_rng(cfg.seed)
    xg = np.linspace(lo, hi, n_grid)
    truth = 0.5 * (xg - 2.0) ** 2
    rows = []
    for p in p_values:
        xs = rng.uniform(lo, hi, p)
        zs = 0.5 * (xs - 2.0) ** 2 + rng.normal(0.0, cfg.feedback_noise_sd, p)
        obs = ObservationSet(xs, zs)
        std_mean, _ = standard_posterior(prior, obs, xg)
        model = build_model(prior, obs, grid)
        mu = model.mean(xg)
        sd = np.sqrt(model.variance(xg))
        for i in range(n_grid):
            rows.append([p, xg[i], truth[i], std_mean[i], mu[i], mu[i] - 2 * sd[i], mu[i] + 2 * sd[i]])
    return rows


@main.command("fit-demo")
@_common
def cmd_fit_demo(config, seed, out, alpha, horizon):
    """Write standard vs constrained GP fits for 3, 7 and 21 observations."""
    try:
        cfg = _resolve(config, seed, out, alpha, horizon)
        rows = fit_demo_rows(cfg)
    except SgpOpgdError as exc:
        _fail(str(exc))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "fit_demo.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "x", "true_U", "standard_mean", "constrained_mean",
                    "constrained_lower", "constrained_upper"])
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])
    click.echo(f"wrote {path} ({len(rows)} rows)")


@main.command("gen-loads")
@_common
@click.option("--loads", "n_loads", type=int, default=None, help="Number of load columns.")
def cmd_gen_loads(config, seed, out, alpha, horizon, n_loads):
    """Write a synthetic load trace CSV (seconds, kW per column)."""
    from .simulator import synth_loads, write_loads_csv

    try:
        cfg = _resolve(config, seed, out, alpha, horizon)
        W = cfg.load_count if n_loads is None else n_loads
        if W < 0:
            _fail("--loads must be >= 0")
        loads = synth_loads(np.random.SeedSequence(cfg.seed), cfg.horizon_steps + 1, W,
                            cfg.step_seconds)
    except SgpOpgdError as exc:
        _fail(str(exc))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "loads.csv"
    write_loads_csv(path, loads, cfg.step_seconds)
    click.echo(f"wrote {path} ({loads.shape[0]} rows, {W} loads)")

