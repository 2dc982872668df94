import csv
import json

import pytest

from moesteer import cli
from moesteer.analysis import SWEEP_HEADER
from moesteer.errors import TrainingError
from moesteer.steering import SteeringMask


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = {k: d / v for k, v in dict(model="model.bin", traces="traces.bin", sur="sur.bin", mask="mask.bin",
                                   prompts="traces.bin.prompts.json").items()}
    assert run("fixture", "--out", p["model"], "--seed", 0) == 0
    assert run("collect", "--model", p["model"], "--out", p["traces"], "--n-per-flag", 40) == 0
    assert run("train-surrogate", "--traces", p["traces"], "--out", p["sur"], "--epochs", 4) == 0
    assert run("optimize", "--surrogate", p["sur"], "--traces", p["traces"], "--out", p["mask"],
               "--steps", 80, "--alpha", 1.5) == 0
    p["dir"] = d
    return p


def manifest(path):
    return json.loads(path.with_name(path.name + ".manifest.json").read_text())


def test_pipeline_writes_artifacts_and_manifests(artifacts):
    for key in ("model", "traces", "sur", "mask", "prompts"):
        assert artifacts[key].exists()
        m = manifest(artifacts[key])
        assert m["seed"] == 0 and len(m["output_sha256"]) == 64
    assert "model" in manifest(artifacts["traces"])["inputs"]
    assert SteeringMask.load(artifacts["mask"]).alpha_recommended == 1.5


def test_apply_and_analyze(artifacts, capsys):
    d = artifacts["dir"]
    common = ("--model", artifacts["model"], "--mask", artifacts["mask"], "--prompts", artifacts["prompts"],
              "--n-utility", 40)
    assert run("apply", *common, "--out", d / "zero.json", "--alpha", 0) == 0
    zero = json.loads((d / "zero.json").read_text())
    assert zero["steered_success"] == zero["baseline_success"]
    assert zero["utility_decline"] == 0.0
    assert run("apply", *common, "--out", d / "rec.json") == 0
    assert json.loads((d / "rec.json").read_text())["alpha"] == 1.5
    capsys.readouterr()
    assert run("analyze", *common, "--out", d / "delta.csv") == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["top_k"] == 2
    rows = list(csv.reader((d / "delta.csv").open()))
    assert rows[0] == ["layer", "expert", "delta"] and len(rows) == 1 + 8 * 16
    for layer in range(8):
        assert abs(sum(float(r[2]) for r in rows[1:] if r[0] == str(layer))) < 1e-9
    assert (d / "delta.csv.utility.json").exists()


def test_sweep_csv(artifacts):
    d = artifacts["dir"]
    args = ("sweep", "--model", artifacts["model"], "--surrogate", artifacts["sur"], "--prompts",
            artifacts["prompts"], "--lambdas", "1e-4", "--alphas", "0,1.5", "--taus", "0.75",
            "--steps", 30, "--flip-cap", 16, "--n-utility", 30)
    assert run(*args, "--out", d / "sweep.csv") == 0
    rows = list(csv.reader((d / "sweep.csv").open()))
    assert rows[0] == SWEEP_HEADER
    assert len(rows) == 1 + 2 + 1 + 1
    # reruns are byte-identical, manifests differ only in their timestamp
    assert run(*args, "--out", d / "sweep2.csv") == 0
    assert (d / "sweep.csv").read_bytes() == (d / "sweep2.csv").read_bytes()
    m1, m2 = manifest(d / "sweep.csv"), manifest(d / "sweep2.csv")
    assert m1["output_sha256"] == m2["output_sha256"]


def test_config_file_and_override(tmp_path, artifacts):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "m.bin"), "layers": 4, "top-k": 2}))
    assert run("fixture", "--config", cfg, "--layers", 3) == 0
    m = manifest(tmp_path / "m.bin")
    assert m["config"]["layers"] == 3 and len(m["config_sha256"]) == 64
    cfg.write_text(json.dumps({"out": "x.bin", "bogus": 1}))
    assert run("fixture", "--config", cfg) == 2
    cfg.write_text("{not json")
    assert run("fixture", "--config", cfg) == 3


def test_exit_codes(tmp_path, artifacts, monkeypatch):
    assert run("collect", "--out", tmp_path / "t.bin") == 2
    assert run("collect", "--model", tmp_path / "missing.bin", "--out", tmp_path / "t.bin") == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage" * 10)
    assert run("train-surrogate", "--traces", bad, "--out", tmp_path / "s.bin") == 3
    assert run("apply", "--model", artifacts["model"], "--mask", artifacts["mask"], "--prompts", bad,
               "--out", tmp_path / "r.json") == 3

    def diverge(*a, **kw):
        raise TrainingError("loss is nan", epoch=2)

    monkeypatch.setattr(cli, "train_surrogate", diverge)
    assert run("train-surrogate", "--traces", artifacts["traces"], "--out", tmp_path / "s.bin") == 4
    assert not (tmp_path / "s.bin").exists()


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    import os

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        run("fixture", "--out", tmp_path / "m.bin")
    assert list(tmp_path.iterdir()) == []
