import json
import math
import subprocess
import sys

import pytest

from vaeconv.cli import main
from vaeconv.config import DEFAULTS, ConfigError, load_config
from vaeconv.runner import apply_axis, read_records, run, sweep

FAST = {
    "train": {"iterations": 40, "B": 8},
    "data": {"n": 200},
    "diag": {"eval_every": 10, "eval_mc": 16, "eval_batch": 16, "snr_reps": 0},
}
DEEP_FAST = {
    "model": {"family": "deep", "enc_hidden": [4], "dec_hidden": [4]},
    "train": {"iterations": 30, "B": 8},
    "data": {"n": 200},
    "diag": {"eval_every": 10, "eval_mc": 8, "eval_batch": 8, "snr_reps": 0, "bounds": False},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_defaults_validate():
    cfg = load_config()
    assert cfg["model"]["family"] == "linear" and cfg["estimator"] == "analytic"
    assert cfg["train"]["K_train"] == 1
    assert DEFAULTS["estimator"] == "pathwise"


@pytest.mark.parametrize(
    "over, path",
    [
        ({"model": {"bogus": 1}}, "model.bogus"),
        ({"nope": {}}, "nope"),
        ({"model": {"d_z": 0}}, "model.d_z"),
        ({"model": {"d_x": 2.5}}, "model.d_x"),
        ({"model": {"family": "cnn"}}, "model.family"),
        ({"model": {"clamps": {"c_Sigma": 20.0}}}, "model.clamps.c_Sigma"),
        ({"model": {"enc_hidden": [0]}}, "model.enc_hidden"),
        ({"model": {"activation": "swish"}}, "model.activation"),
        ({"objective": {"beta": 2.0}}, "objective.beta"),
        ({"optim": {"beta1": 0.9999, "beta2": 0.99}}, "optim.beta1"),
        ({"optim": {"C_gamma": -1}}, "optim.C_gamma"),
        ({"data": {"test_frac": 1.0}}, "data.test_frac"),
        ({"diag": {"snr_reps": 5}}, "diag.snr_reps"),
        ({"diag": {"fit_window": [10, 5]}}, "diag.fit_window"),
        ({"model": {"family": "deep"}, "objective": {"kind": "iwae", "K": 5}, "estimator": "pathwise"}, "estimator"),
        ({"model": {"family": "deep"}, "estimator": "analytic"}, "estimator"),
        ({"model": {"family": "deep"}, "diag": {"grad_eval": "population"}}, "diag.grad_eval"),
        ({"train": {"B": True}}, "train.B"),
    ],
)
def test_validation_reports_field_path(over, path):
    with pytest.raises(ConfigError) as info:
        load_config(over)
    assert info.value.path == path


def test_epochs_converted_to_iterations():
    cfg = load_config({"data": {"n": 1000, "test_frac": 0.2}, "train": {"epochs": 3, "B": 32}})
    assert cfg["train"]["iterations"] == math.ceil(800 * 3 / 32) and cfg["train"]["epochs"] is None


def test_seed_override_and_file(tmp_path):
    p = _write(tmp_path, {"data": {"seed": 3}})
    assert load_config(p)["data"]["seed"] == 3
    assert load_config(p, seed=7)["data"]["seed"] == 7
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_zero_iterations_gives_single_record(tmp_path):
    res = run(load_config({**FAST, "train": {"iterations": 0, "B": 8}}), tmp_path)
    assert len(res.records) == 1 and res.records[0].iter == 0
    assert "unavailable" in res.summary["rate_fit"]["status"]


def test_outputs_written(tmp_path):
    res = run(load_config(FAST), tmp_path)
    cols = read_records(tmp_path / "records.csv")
    assert list(cols["iter"]) == [0, 10, 20, 30, 40]
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["status"] == "ok" and "smoothness" in summ
    assert (tmp_path / "params.json").exists()
    assert res.records[-1].grad_norm_sq == pytest.approx(cols["grad_norm_sq"][-1], rel=1e-15)


@pytest.mark.parametrize("over", [FAST, DEEP_FAST])
def test_records_byte_identical(tmp_path, over):
    run(load_config(over), tmp_path / "a")
    run(load_config(over), tmp_path / "b")
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()


def test_apply_axis():
    base = load_config({"model": {"family": "deep"}, "objective": {"kind": "iwae", "K": 2}, "estimator": "iwae"})
    assert apply_axis(base, "K", "5")["train"]["K_train"] == 5
    bk = apply_axis(base, "BK", "4x3")
    assert bk["train"]["B"] == 4 and bk["objective"]["K"] == 3
    assert apply_axis(load_config(), "beta", "4")["objective"]["kind"] == "beta"
    with pytest.raises(ValueError):
        apply_axis(base, "lr", 1)


def test_single_value_sweep_equals_run(tmp_path):
    cfg = load_config(FAST)
    table, rows = sweep(cfg, "beta", ["1"], [0], tmp_path / "s")
    res = run(cfg, tmp_path / "r")
    assert rows[0]["grad_norm_sq"] == res.records[-1].grad_norm_sq
    assert (tmp_path / "s" / "beta=1" / "seed=0" / "records.csv").read_bytes() == (tmp_path / "r" / "records.csv").read_bytes()
    assert (tmp_path / "s" / "sweep.csv").exists()


def test_parallel_sweep_matches_serial(tmp_path):
    cfg = load_config(FAST)
    _, serial = sweep(cfg, "beta", ["0.5", "2"], [0, 1], tmp_path / "a", jobs=1)
    _, par = sweep(cfg, "beta", ["0.5", "2"], [0, 1], tmp_path / "b", jobs=2)
    assert serial == par
    for d in ("beta=0.5/seed=1", "beta=2/seed=0"):
        assert (tmp_path / "a" / d / "records.csv").read_bytes() == (tmp_path / "b" / d / "records.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_records_failures_and_continues():
    cfg = load_config({**FAST, "optim": {"C_gamma": 1e6, "kind": "sgd"}})
    table, rows = sweep(cfg, "beta", ["1", "2"], [0])
    assert [r["status"] for r in rows] == ["aborted", "aborted"]
    assert table[0]["n_failed"] == 1 and math.isnan(table[0]["median_grad_norm_sq"])


def test_cli_run_and_exit_codes(tmp_path, capsys):
    p = _write(tmp_path, FAST)
    assert main(["--config", p, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert (tmp_path / "o" / "records.csv").exists()
    bad = _write(tmp_path, {"model": {"bogus": 1}}, "bad.json")
    assert main(["--config", bad, "--out", str(tmp_path / "x"), "--quiet"]) == 2
    assert "model.bogus" in capsys.readouterr().err
    assert main(["--config", p, "--sweep", "lr=1,2", "--quiet"]) == 2
    assert main(["--config", p, "--sweep", "beta=", "--quiet"]) == 2
    assert main(["--config", p, "--sweep", "beta=1", "--seeds", "a", "--quiet"]) == 2
    assert main(["--config", str(tmp_path / "missing.json"), "--quiet"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_runtime_failure_exit_1(tmp_path, capsys):
    p = _write(tmp_path, {**FAST, "optim": {"kind": "sgd", "C_gamma": 1e6}})
    assert main(["--config", p, "--out", str(tmp_path / "o"), "--quiet"]) == 1
    assert "aborted" in capsys.readouterr().err
    summ = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summ["status"] == "aborted" and summ["last_good_iteration"] < 40
    assert (tmp_path / "o" / "records.csv").exists()


def test_cli_sweep(tmp_path):
    p = _write(tmp_path, FAST)
    assert main(["--config", p, "--out", str(tmp_path / "o"), "--sweep", "beta=0.5,2", "--seeds", "0,1", "--quiet"]) == 0
    lines = (tmp_path / "o" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("axis,value") and len(lines) == 3


def test_module_entry_point(tmp_path):
    p = _write(tmp_path, {"model": {"bogus": 1}})
    r = subprocess.run([sys.executable, "-m", "vaeconv", "--config", p, "--quiet"], capture_output=True, text=True)
    assert r.returncode == 2 and "model.bogus" in r.stderr
