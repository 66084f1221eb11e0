import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pipeline_helpers import run, run_pipeline, small_config
from weakseg.cli import CURVE_COLUMNS, METRIC_COLUMNS, SWEEP_GRIDS, sweep_grid
from weakseg.core import ValidationError
from weakseg.io import Manifest, ManifestRecord, RunConfig, read_manifest, write_manifest
from weakseg.losses import ConstraintConfig


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    small_config().save(path)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config_file):
    return run_pipeline(tmp_path_factory.mktemp("run"), config_file)


def test_manifest_roundtrip(tmp_path):
    m = Manifest([ManifestRecord("a", "x/a_img", "x/a_lab", None, "in", True, 2),
                  ManifestRecord("b", "x/b_img", "x/b_lab", "y/b_ann", "shift", False, 0)])
    write_manifest(tmp_path / "m.jsonl", m)
    back = read_manifest(tmp_path / "m.jsonl", check=False)
    assert back == m and back.root == tmp_path
    assert [r.case_id for r in read_manifest(tmp_path / "m.jsonl", "shift", check=False).records] \
        == ["b"]
    with pytest.raises(ValidationError):
        read_manifest(tmp_path / "m.jsonl")  # referenced files are missing


def test_manifest_rejects_duplicates_and_junk(tmp_path):
    with pytest.raises(ValidationError):
        Manifest([ManifestRecord("a", "i", "l"), ManifestRecord("a", "i2", "l2")])
    (tmp_path / "bad.jsonl").write_text('{"case_id": "a"\n')
    with pytest.raises(ValidationError):
        read_manifest(tmp_path / "bad.jsonl", check=False)
    (tmp_path / "bad2.jsonl").write_text('{"case_id": "a", "image": "i", "labels": "l", "x": 1}\n')
    with pytest.raises(ValidationError):
        read_manifest(tmp_path / "bad2.jsonl", check=False)


def test_run_config_roundtrip(tmp_path):
    cfg = small_config()
    cfg = RunConfig.from_dict({**cfg.to_dict(),
                               "constraint": ConstraintConfig.preset_2d("image_tag").to_dict()})
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back == cfg
    # every default is materialised on disk
    d = json.loads((tmp_path / "c.json").read_text())
    assert {"lr", "weight_decay", "epochs", "loss"} <= set(d["train"])
    assert d["constraint"]["lambda"] == 1e-5
    assert RunConfig.load(None) == RunConfig()


def test_run_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.json").write_text('{"train": {"epochz": 3}}')
    with pytest.raises(ValidationError):
        RunConfig.load(tmp_path / "c.json")
    (tmp_path / "d.json").write_text('{"trainer": {}}')
    with pytest.raises(ValidationError):
        RunConfig.load(tmp_path / "d.json")
    (tmp_path / "e.json").write_text("{nope")
    with pytest.raises(ValidationError):
        RunConfig.load(tmp_path / "e.json")


def test_pipeline_emits_all_artifacts(pipeline):
    for d in pipeline.values():
        assert (d / "run_config.json").exists()
    assert len(read_rows(pipeline["annotate"] / "coverage.csv")) == 2 * 12 + 2
    for suffix in (".bin", ".index", ".netspec.json"):
        assert (pipeline["train"] / f"model{suffix}").exists()
    log = read_rows(pipeline["train"] / "loss_log.csv")
    assert [r["epoch"] for r in log] == ["1", "2"]
    meta = json.loads((pipeline["train"] / "run_meta.json").read_text())
    assert meta["fold"] == 0 and meta["val_cases"]
    preds = (pipeline["predict"] / "predictions.jsonl").read_text().splitlines()
    assert len(preds) == 12
    with open(pipeline["eval"] / "metrics.csv") as fh:
        assert fh.readline().strip().split(",") == list(METRIC_COLUMNS)
    with open(pipeline["eval"] / "curve.csv") as fh:
        assert fh.readline().strip().split(",") == list(CURVE_COLUMNS)
    row = read_rows(pipeline["eval"] / "metrics.csv")[0]
    assert row["model"] == "m" and row["dataset"] == "val"
    assert 0 <= float(row["dice_prostate"]) <= 1


def test_ensemble_and_report(pipeline, tmp_path):
    manifest = pipeline["annotate"] / "manifest.jsonl"
    assert run("ensemble", "--checkpoints", pipeline["train"], pipeline["train"] / "model",
               "--manifest", manifest, "--out", tmp_path / "ens") == 0
    assert run("eval", "--manifest", manifest, "--predictions", tmp_path / "ens",
               "--name", "m", "--dataset", "shifted", "--out", tmp_path / "ev") == 0
    # two identical members reproduce the single model
    a = read_rows(pipeline["eval"] / "metrics.csv")[0]
    b = read_rows(tmp_path / "ev" / "metrics.csv")[0]
    assert {k: v for k, v in a.items() if k != "dataset"} == \
        {k: v for k, v in b.items() if k != "dataset"}
    assert run("report", "--inputs", pipeline["eval"], tmp_path / "ev",
               "--out", tmp_path / "rep") == 0
    for name in ("froc.svg", "pr.svg", "relative_change.csv", "summary.csv"):
        assert (tmp_path / "rep" / name).exists()
    rel = read_rows(tmp_path / "rep" / "relative_change.csv")
    assert {r["metric"] for r in rel} == {"sensitivity_at_1fp", "AP", "AUROC", "dice_prostate"}
    assert all(r["ratio"] in ("", "1.0") for r in rel)


@pytest.mark.filterwarnings("ignore:one sampling group")
def test_eval_without_positive_patients(tmp_path):
    cfg = small_config(n_cases=4, positive_fraction=0.0)
    cfg.save(tmp_path / "c.json")
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "s") == 0
    manifest = tmp_path / "s" / "manifest.jsonl"
    assert run("train", "--config", tmp_path / "c.json", "--manifest", manifest,
               "--out", tmp_path / "t") != 0  # weak loss without annotations
    d = cfg.to_dict()
    d["train"]["loss"] = "supervised_ce_dice"
    (tmp_path / "sup.json").write_text(json.dumps(d))
    assert run("train", "--config", tmp_path / "sup.json", "--manifest", manifest,
               "--out", tmp_path / "t") == 0
    assert run("predict", "--checkpoints", tmp_path / "t", "--manifest", manifest,
               "--out", tmp_path / "p") == 0
    assert run("eval", "--manifest", manifest, "--predictions", tmp_path / "p",
               "--out", tmp_path / "e") == 0
    row = read_rows(tmp_path / "e" / "metrics.csv")[0]
    assert row["AUROC"] == "" and row["AP"] == ""


def test_error_records_and_exit_codes(tmp_path, capsys):
    assert run("eval", "--out", tmp_path / "x") == 2
    rec = json.loads(capsys.readouterr().err.strip())
    assert rec["status"] == "error" and rec["command"] == "eval" and rec["kind"] == "missing_input"
    (tmp_path / "c.json").write_text('{"net": {"filters": [4]}}')
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "y") == 2
    rec = json.loads(capsys.readouterr().err.strip())
    assert rec["kind"] == "invalid_input"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exit_code(pipeline, tmp_path, capsys):
    d = small_config().to_dict()
    d["train"]["lr"] = 1e30
    d["train"]["loss"] = "supervised_ce_dice"
    (tmp_path / "c.json").write_text(json.dumps(d))
    code = run("train", "--config", tmp_path / "c.json",
               "--manifest", pipeline["annotate"] / "manifest.jsonl", "--out", tmp_path / "t")
    assert code == 3
    rec = json.loads(capsys.readouterr().err.strip())
    assert rec["kind"] == "non_finite_loss" and "cases" in rec["detail"]


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "weakseg", "eval", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2
    assert json.loads(out.stderr.strip().splitlines()[-1])["status"] == "error"


def test_sweep_grid_ranges():
    g = SWEEP_GRIDS["2d"]
    np.testing.assert_allclose(g["lr"], 10 ** np.arange(-4, -1.99, 0.5))
    np.testing.assert_allclose(g["weight_decay"], [1e-5, 1e-4, 1e-3, 1e-2])
    np.testing.assert_allclose(g["lam"], [1e-5, 1e-4, 1e-3, 1e-2])
    assert g["a"] == [5, 10] and g["b"] == [100, 200, 300, 400, 500, 600]
    np.testing.assert_allclose(SWEEP_GRIDS["3d"]["lam"], [1e-9, 1e-8, 1e-7, 1e-6, 1e-5])
    assert len(sweep_grid(g, "it")) == 5 * 4 * 4
    assert len(sweep_grid(g, "cb")) == 12
    with pytest.raises(ValidationError):
        sweep_grid(g, "bounds")


def test_sweep_command_ranks_results(pipeline, tmp_path):
    grid = {"lr": [1e-2], "weight_decay": [1e-4], "lam": [1e-6, 1e-5], "a": [5], "b": [100, 200]}
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    d = small_config(epochs=1).to_dict()
    (tmp_path / "c.json").write_text(json.dumps(d))
    assert run("sweep", "--config", tmp_path / "c.json", "--grid", tmp_path / "grid.json",
               "--manifest", pipeline["annotate"] / "manifest.jsonl",
               "--out", tmp_path / "sw") == 0
    rows = read_rows(tmp_path / "sw" / "sweep.csv")
    assert [r["rank"] for r in rows] == ["1", "2", "3", "4"]
    assert sorted(r["stage"] for r in rows) == ["cb", "cb", "it", "it"]
    aps = [float(r["val_AP"]) if r["val_AP"] else -1.0 for r in rows]
    assert aps == sorted(aps, reverse=True)


def test_rerun_from_persisted_config_is_byte_identical(pipeline, tmp_path):
    again = run_pipeline(tmp_path, pipeline["train"] / "run_config.json")
    for name in ("metrics.csv", "curve.csv"):
        assert (again["eval"] / name).read_bytes() == (pipeline["eval"] / name).read_bytes()
