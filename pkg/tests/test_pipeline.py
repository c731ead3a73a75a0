import json
import logging

import filelock
import numpy as np
import pytest

from due import pipeline
from due.cli import main
from due.config import RunConfig, apply_overrides, from_dict, load_config
from due.errors import ConfigError, DependencyError, ReportingError
from due.report import emit_report, load_report

from tiny_config import write_tiny


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    cfg_path = write_tiny(base / "tiny.json")
    config = load_config(cfg_path)
    run = pipeline.open_run(config, base / "run")
    pipeline.run_all(run)
    return run, cfg_path


def test_config_defaults_follow_reported_setup():
    c = RunConfig()
    assert c.train.lam == 1.0 and c.train.lr == 1e-3 and c.train.epochs == 50
    assert c.interp.p_mask == 0.5 and c.eval.threshold == 0.5 and c.interp.n_steps == 200


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"train": {"lamda": 1}})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, ["train.nope=3"])
    with pytest.raises(ConfigError):
        load_config(None, ["train.lam"])


def test_overrides_and_seed():
    c = load_config(None, ["train.lam=0.1", "data.synthetic.n_pos=3", "train.modes=[\"due\"]"], seed=9)
    assert c.train.lam == 0.1 and c.data.synthetic.n_pos == 3 and c.train.modes == ["due"] and c.seed == 9
    assert apply_overrides({"a": {"b": 1}}, ["a.b=x"]) == {"a": {"b": "x"}}


def test_run_directory_contents(tiny_run):
    run, _ = tiny_run
    saved = json.loads((run.dir / "config.json").read_text())
    assert saved["train"]["epochs"] == 2
    m = run.manifest()["stages"]
    assert set(m) == {"gen-data", "train-interp", "mc-variance", "train-uq", "build-targets",
                      "train:baseline", "train:baseline_plus", "train:due", "evaluate"}
    for rec in m.values():
        assert {"input_hash", "output_hash", "outputs", "wall_time", "seed"} <= set(rec)
    for mode in ("baseline", "baseline_plus", "due"):
        d = run.dir / "eval" / mode
        assert (d / "report.json").exists() and (d / "threshold_sweep.png").exists()
        assert list(d.glob("overlay_*.png"))
        assert (run.dir / "models" / mode / "seed1" / "meta.json").exists()
    header = (run.dir / "eval" / "summary.tsv").read_text().splitlines()[0].split("\t")
    assert header[:3] == ["name", "iou_mean", "iou_std"]


def test_rerun_is_up_to_date(tiny_run, caplog):
    run, _ = tiny_run
    before = run.manifest()
    with caplog.at_level(logging.INFO, logger="due"):
        pipeline.run_all(run)
    assert sum("up to date" in r.message for r in caplog.records) == 9
    assert run.manifest() == before


def test_report_round_trip_and_aggregates(tiny_run):
    run, _ = tiny_run
    rep = load_report(run.dir / "eval" / "due" / "report.json")
    per_seed = rep["per_seed"]
    assert rep["aggregates"]["iou"]["n"] == 2
    assert rep["aggregates"]["iou"]["mean"] == pytest.approx(np.mean([r["iou"] for r in per_seed]), abs=1e-12)
    for r in per_seed:
        rows = [s["iou"] for s in rep["per_sample"] if s["seed"] == r["seed"] and s["label"] == 1]
        assert r["iou"] == pytest.approx(np.mean(rows), abs=1e-12)
    assert "run_dir" not in rep["config"]
    assert len(rep["sweep"]["thresholds"]) == 10
    for v in rep["aggregates"].values():
        assert 0 <= v["mean"] <= 1


def test_same_seed_same_report(tiny_run, tmp_path):
    run, cfg_path = tiny_run
    other = pipeline.open_run(load_config(cfg_path), tmp_path / "again")
    pipeline.run_all(other)
    for mode in ("baseline", "baseline_plus", "due"):
        a = load_report(run.dir / "eval" / mode / "report.json")
        b = load_report(other.dir / "eval" / mode / "report.json")
        assert a == b


def test_missing_upstream_names_stage(tmp_path):
    run = pipeline.open_run(load_config(None), tmp_path / "empty")
    with pytest.raises(DependencyError) as e:
        pipeline.train_mode(run, "baseline")
    assert e.value.stage == "gen-data"


def test_modified_output_is_detected(tiny_run, tmp_path):
    import shutil

    run, cfg_path = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(run.dir, copy)
    victim = next((copy / "uq").glob("*.json"))
    victim.write_text(victim.read_text() + " ")
    r2 = pipeline.Run(load_config(cfg_path), copy)
    with pytest.raises(DependencyError) as e:
        pipeline.build_targets(r2)
    assert e.value.stage == "train-uq"


def test_cli_exit_codes(tmp_path, tiny_run):
    _, cfg_path = tiny_run
    assert main(["train", "--config", str(cfg_path), "--run-dir", str(tmp_path / "x")]) == 11
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert main(["gen-data", "--config", str(bad), "--run-dir", str(tmp_path / "y")]) == 3
    (tmp_path / "z").mkdir()
    with filelock.FileLock(str(tmp_path / "z" / ".lock")):
        assert main(["gen-data", "--config", str(cfg_path), "--run-dir", str(tmp_path / "z")]) == 12


def test_cli_env_run_dir(tmp_path, tiny_run, monkeypatch, capsys):
    _, cfg_path = tiny_run
    monkeypatch.setenv("DUE_RUN_DIR", str(tmp_path / "envrun"))
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "envrun" / "data" / "manifest.json").exists()
    assert main(["show-config", "--config", str(cfg_path), "train.lam=0.5"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["train"]["lam"] == 0.5 and shown["run_dir"] == str(tmp_path / "envrun")


def test_lambda_sweep(tiny_run):
    run, _ = tiny_run
    rows = pipeline.sweep(run, "lambda", [0.001, 1.0])
    assert len(rows) == 2 and all(r["name"] == "due" for r in rows)
    root = run.dir / "sweeps" / "lambda"
    assert (root / "0.001" / "eval" / "due" / "report.json").exists()
    assert (root / "comparison.tsv").read_text().count("\n") == 3
    assert (root / "lambda_due.png").exists()
    # lambda = 1 sub-run reproduces the parent's due model exactly
    a = load_report(root / "1" / "eval" / "due" / "report.json")["aggregates"]
    b = load_report(run.dir / "eval" / "due" / "report.json")["aggregates"]
    assert a == b


def test_train_size_sweep(tiny_run):
    run, _ = tiny_run
    rows = pipeline.sweep(run, "train_size", [4])
    assert {r["n_train"] for r in rows} == {4}
    assert len(rows) == 3


def test_emit_report_reports_missing_fields(tmp_path):
    with pytest.raises(ReportingError):
        emit_report(tmp_path, {"config": {}})
    with pytest.raises(ReportingError):
        load_report(tmp_path / "absent.json")
