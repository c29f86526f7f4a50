import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from sgpopgd.cli import fit_demo_rows, main
from sgpopgd.config import RunConfig, load_config
from sgpopgd.errors import ConfigError, SchemaError
from sgpopgd.runlog import read_runlog, write_runlog
from sgpopgd.simulator import run

SMALL = {"counts": {"battery": 2, "hvac": 1, "ev": 1}, "horizon_steps": 30, "feedback_period": 10}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def _run(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


def test_bundled_config_loads():
    cfg = load_config()
    assert cfg.horizon_steps == 8640 and cfg.M == 30 and cfg.alpha == 0.002
    assert len(cfg.jump_steps()) == 6


def test_config_errors_name_location(tmp_path):
    with pytest.raises(ConfigError, match="missing.json"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n "horizon_steps": }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(bad)
    bad.write_text('{"sede": 1}')
    with pytest.raises(ConfigError, match="sede"):
        load_config(bad)
    bad.write_text('{"kinds": {"ev": {"gamma_U": 5.0}}}')
    with pytest.raises(ConfigError, match="kinds.ev"):
        load_config(bad)


def test_config_roundtrip_and_digest():
    cfg = RunConfig(seed=4)
    again = cfg.replace()
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.replace(seed=5).digest() != cfg.digest()


def test_missing_config_exit_code(tmp_path):
    res = _run(["run", "--config", str(tmp_path / "nope.json")])
    assert res.exit_code == 1
    assert "nope.json" in res.output


def test_run_metrics_roundtrip_and_bytes(cfg_path, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        res = _run(["run", "--config", str(cfg_path), "--out", str(out), "--quiet"])
        assert res.exit_code == 0, res.output
        outs.append(out / "runlog.csv")
    assert outs[0].read_bytes() == outs[1].read_bytes()
    with outs[0].open() as fh:
        assert sum(1 for _ in fh) == SMALL["horizon_steps"] + 1
    res = _run(["metrics", str(outs[0])])
    assert res.exit_code == 0, res.output
    assert "rho=" in res.output and "regret_final=" in res.output
    rep = json.loads((outs[0].parent / "runlog_metrics.json").read_text())
    assert rep["contraction_violations"] >= 0


def test_flag_overrides(cfg_path, tmp_path):
    out = tmp_path / "o"
    res = _run(["run", "--config", str(cfg_path), "--out", str(out), "--seed", "3",
                "--alpha", "auto", "--horizon", "5", "--quiet"])
    assert res.exit_code == 0
    meta = json.loads((out / "runlog.json").read_text())
    assert meta["seed"] == 3 and meta["T"] == 5 and meta["config"]["alpha"] == "auto"
    res = _run(["run", "--config", str(cfg_path), "--alpha", "fast"])
    assert res.exit_code == 1


def test_nonconvergence_exit_code(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, "horizon_steps": 3, "oracle_max_iter": 1}))
    res = _run(["run", "--config", str(p), "--out", str(tmp_path / "o"), "--quiet"])
    assert res.exit_code == 2
    assert (tmp_path / "o" / "runlog.csv").is_file()


def test_metrics_on_empty_log(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, "horizon_steps": 0}))
    _run(["run", "--config", str(p), "--out", str(tmp_path / "o"), "--quiet"])
    res = _run(["metrics", str(tmp_path / "o" / "runlog.csv")])
    assert res.exit_code == 0
    rep = json.loads((tmp_path / "o" / "runlog_metrics.json").read_text())
    assert rep["omega_T"] == 0 and rep["E_T"] == 0 and rep["regret_final"] == 0


def test_corrupted_header(tmp_path):
    log = run(RunConfig(**{**SMALL, "horizon_steps": 4}))
    csv_path, _ = write_runlog(log, tmp_path)
    text = csv_path.read_text().replace("y_hat_star", "y_hat_start", 1)
    csv_path.write_text(text)
    with pytest.raises(SchemaError, match="y_hat_star"):
        read_runlog(csv_path)
    res = _run(["metrics", str(csv_path)])
    assert res.exit_code == 1 and "y_hat_star" in res.output


def test_runlog_roundtrip_is_lossless(tmp_path):
    log = run(RunConfig(**SMALL))
    csv_path, _ = write_runlog(log, tmp_path)
    back = read_runlog(csv_path)
    for name in ("x", "xhat_star", "y_hat", "f_t", "f_t_star", "sup_err"):
        np.testing.assert_array_equal(getattr(back, name), getattr(log, name))
    assert back.metadata["M"] == log.metadata["M"]


def test_fit_demo_command(tmp_path):
    res = _run(["fit-demo", "--out", str(tmp_path)])
    assert res.exit_code == 0
    with (tmp_path / "fit_demo.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    counts = {p: sum(1 for r in rows if r["p"] == p) for p in ("3", "7", "21")}
    assert counts == {"3": 200, "7": 200, "21": 200}


def _fd2(y, x):
    h = x[1] - x[0]
    return (y[2:] - 2 * y[1:-1] + y[:-2]) / h**2


def test_fit_demo_constrained_shape_and_standard_contrast():
    cfg = load_config()
    g, L = cfg.kinds["battery"].gamma_U, cfg.kinds["battery"].L_U
    any_negative = False
    for seed in range(20):
        rows = np.array(fit_demo_rows(cfg.replace(seed=seed)))
        for p in (3, 7, 21):
            blk = rows[rows[:, 0] == p]
            d2 = _fd2(blk[:, 4], blk[:, 1])
            assert np.all(d2 >= 0.9 * g) and np.all(d2 <= 1.1 * L)
        blk = rows[rows[:, 0] == 3]
        any_negative |= bool(np.any(_fd2(blk[:, 3], blk[:, 1]) < 0))
    assert any_negative


def test_gen_loads(tmp_path):
    res = _run(["gen-loads", "--horizon", "12", "--out", str(tmp_path), "--loads", "3"])
    assert res.exit_code == 0
    lines = (tmp_path / "loads.csv").read_text().splitlines()
    assert len(lines) == 14 and lines[0].startswith("seconds,")
