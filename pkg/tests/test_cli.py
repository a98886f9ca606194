import json
import subprocess
import sys

import numpy as np
import pytest

from contcrm.cli import main
from contcrm.data import load_csv, save_csv

from conftest import make_dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def moons(tmp_path):
    path = tmp_path / "moons.csv"
    assert run("--seed", 1, "generate", "--env", "noisymoons", "--n", 600, "--out", path) == 0
    return path


def test_generate_is_reproducible(tmp_path, moons):
    again = tmp_path / "again.csv"
    assert run("--seed", 1, "generate", "--env", "noisymoons", "--n", 600, "--out", again) == 0
    assert moons.read_bytes() == again.read_bytes()
    ds = load_csv(moons)
    assert ds.n == 600 and ds.d == 2
    manifest = json.loads((tmp_path / "moons.csv.manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["n"] == 600


def test_generate_warfarin(tmp_path):
    path = tmp_path / "w.csv"
    assert run("generate", "--env", "warfarin-sim", "--n", 500, "--out", path) == 0
    ds = load_csv(path)
    assert np.all(ds.actions > 0) and np.all(ds.costs >= 0) and ds.d == 5


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CRM_SEED", "7")
    a = tmp_path / "a.csv"
    assert run("generate", "--env", "noisycircles", "--n", 50, "--out", a) == 0
    assert json.loads((tmp_path / "a.csv.manifest.json").read_text())["seed"] == 7
    b = tmp_path / "b.csv"
    assert run("--seed", 7, "generate", "--env", "noisycircles", "--n", 50, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_records_flags_and_decreases(tmp_path, moons):
    out = tmp_path / "run"
    code = run(
        "train", "--data", moons, "--family", "lognormal", "--mean", "constant",
        "--estimator", "scips", "--M", 10, "--prox-kappa", 0.1, "--max-iter", 20, "--out", out,
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    cand = manifest["config"]["candidate"]
    assert cand["objective"]["estimator"] == "scips" and cand["objective"]["M"] == 10
    assert cand["prox"]["kappa"] == 0.1 and cand["prox"]["outer_iters"] == 10
    trace = json.loads((out / "train_result.json").read_text())["trace"]
    assert all(a >= b - 1e-12 for a, b in zip(trace, trace[1:]))


def test_train_with_config_file(tmp_path, moons):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"mean_kind": "ccp", "n_anchors": 3}, "objective": {"M": 4.6}, "prox": {"kappa": 0.0, "outer_iters": 1, "inner": {"max_iter": 10}}}))
    out = tmp_path / "ccp"
    assert run("train", "--data", moons, "--config", cfg, "--out", out) == 0
    policy = json.loads((out / "policy.json").read_text())
    assert policy["mean_kind"] == "ccp" and len(policy["anchors"]) == 3


def test_evaluate_exit_codes(tmp_path, moons):
    out = tmp_path / "run"
    assert run("train", "--data", moons, "--mean", "linear", "--max-iter", 20, "--out", out) == 0
    report = tmp_path / "report.json"
    assert run("evaluate", "--model", out / "policy.json", "--data", moons, "--report", report) == 0
    rep = json.loads(report.read_text())
    assert rep["valid"] and "reject_H0" in rep and rep["ess_ratio_test"] > 0
    # an impossible ESS threshold makes the estimate invalid
    assert run("evaluate", "--model", out / "policy.json", "--data", moons, "--nu", 1.0, "--report", report) == 2
    assert json.loads(report.read_text())["reject_H0"] is False


def test_bad_input_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,action,propensity,cost\n1,2,-1,0\n")
    assert run("train", "--data", bad, "--out", tmp_path / "o") == 2
    assert run("train", "--data", tmp_path / "missing.csv", "--out", tmp_path / "o") == 2


def test_internal_error_exit_code(tmp_path, monkeypatch):
    import contcrm.cli as cli

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "train_candidate", boom)
    path = tmp_path / "d.csv"
    save_csv(make_dataset(n=30), path)
    assert run("train", "--data", path, "--out", tmp_path / "o") == 1


def test_select(tmp_path, moons):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "base": {"model": {"family": "normal", "mean_kind": "constant"}, "prox": {"kappa": 0.0, "outer_iters": 1, "inner": {"max_iter": 15}}},
        "axes": {"M": [2.0, 10.0]},
    }))
    out = tmp_path / "sel"
    assert run("select", "--grid", grid, "--data", moons, "--folds", 3, "--out", out) == 0
    best = json.loads((out / "best.json").read_text())
    assert best["index"] in (0, 1)
    assert len((out / "cv_table.csv").read_text().strip().splitlines()) == 1 + 2 * 3
    assert run("select", "--grid", grid, "--data", moons, "--folds", 3, "--nu", 1.0, "--out", out) == 2


@pytest.mark.parametrize(
    "config",
    [{"bogus": 1}, {"model": {"mean_knd": "ccp"}}, {"objective": {"estimator": "ips", "lamda_var": 0.1}}, {"prox": 3}],
)
def test_train_rejects_unknown_config_fields(tmp_path, moons, config):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(config))
    assert run("train", "--data", moons, "--config", cfg, "--max-iter", 2, "--out", tmp_path / "m") == 2


def test_select_rejects_unknown_axis(tmp_path, moons):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"axes": {"MM": [1.0, 2.0]}}))
    assert run("select", "--data", moons, "--grid", grid, "--out", tmp_path / "sel") == 2


def test_validate_protocol_and_replay(tmp_path):
    out = tmp_path / "vp"
    assert run("--seed", 2, "validate-protocol", "--setup", "i", "--n-policies", 30, "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    counts = summary["counts"]["snips"]
    assert counts["tp"] + counts["fp"] + counts["fn"] + counts["tn"] == 30
    first = (out / "policies.csv").read_text()
    (out / "policies.csv").unlink()
    assert run("replay", out / "manifest.json") == 0
    assert (out / "policies.csv").read_text() == first


def test_validate_protocol_rejects_unknown_scenario_field(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("validate-protocol", "--setup", "ii", "--n-policies", 5, "--config", cfg, "--out", tmp_path / "x") == 2


def test_whatif(tmp_path):
    out = tmp_path / "wi"
    assert run("whatif", "--grid", "1.5,2.117,3", "--n", 2000, "--out", out) == 0
    lines = (out / "whatif.csv").read_text().strip().splitlines()
    assert lines[0].startswith("mu,ess_ratio") and len(lines) == 4
    assert run("whatif", "--grid", "a,b", "--out", out) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "contcrm", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "contcrm" in res.stdout
