import csv
import json
import subprocess
import sys

import pytest

from adafuse.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    cfg = write(d / "synth.json", {"n_episodes": 5, "clips_per_episode": 4, "seed": 7})
    out = d / "data.jsonl"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_generate_header_and_reproducible(tmp_path, data):
    first = json.loads(data.read_text().splitlines()[0])
    assert first["task"] == "IPP" and "episodes" in first
    again = tmp_path / "again.jsonl"
    cfg = write(tmp_path / "c.json", {"n_episodes": 5, "clips_per_episode": 4, "seed": 7})
    assert main(["generate", "--config", cfg, "--out", str(again)]) == 0
    assert again.read_bytes() == data.read_bytes()


def test_generate_bad_config_exit_2(tmp_path):
    out = str(tmp_path / "x.jsonl")
    assert main(["generate", "--config", write(tmp_path / "a.json", {"noise": [0.1, -1.0, 0.1]}),
                 "--out", out]) == 2
    assert main(["generate", "--config", write(tmp_path / "b.json", {"colour": 1}), "--out", out]) == 2
    (tmp_path / "c.json").write_text("{not json")
    assert main(["generate", "--config", str(tmp_path / "c.json"), "--out", out]) == 2


def test_train_writes_run_dir(tmp_path, data):
    run = tmp_path / "run"
    cfg = write(tmp_path / "t.json", {"epochs": 2, "slave_epochs": 1, "n_folds": 2})
    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(run)]) == 0
    for name in ("report.csv", "weights.csv", "history.csv", "predictions.csv", "attention.json",
                 "fold0.ckpt", "fold1.ckpt"):
        assert (run / name).exists(), name
    # idempotent: same outputs on a second run
    before = {p.name: p.read_bytes() for p in run.iterdir()}
    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(run)]) == 0
    assert before == {p.name: p.read_bytes() for p in run.iterdir()}


def test_train_no_alignment_history(tmp_path, data):
    run = tmp_path / "run"
    cfg = write(tmp_path / "t.json", {"epochs": 2, "slave_epochs": 1, "n_folds": 1})
    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(run),
                 "--ablation", "no_alignment"]) == 0
    with open(run / "history.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["L_align"]) == 0.0 for r in rows)


def test_train_error_codes(tmp_path, data):
    cfg = write(tmp_path / "t.json", {"epochs": 1})
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--config", cfg,
                 "--out", str(tmp_path / "r")]) == 1
    assert main(["train", "--data", str(data), "--config", write(tmp_path / "u.json", {"epoch": 3}),
                 "--out", str(tmp_path / "r")]) == 2
    # 5 episodes cannot hold 4 rolling folds
    assert main(["train", "--data", str(data), "--config", cfg, "--n-folds", "4",
                 "--out", str(tmp_path / "r")]) == 1


def test_train_divergence_exit_3(tmp_path, data):
    cfg = write(tmp_path / "t.json", {"epochs": 3, "slave_epochs": 1, "n_folds": 1, "lr": 1e300})
    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(tmp_path / "r")]) == 3


def test_flags_override_config(tmp_path, data):
    run = tmp_path / "run"
    cfg = write(tmp_path / "t.json", {"epochs": 5, "slave_epochs": 1, "n_folds": 1})
    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(run),
                 "--epochs", "1"]) == 0
    assert json.loads((run / "config.json").read_text())["epochs"] == 1


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "max_rel_err" in capsys.readouterr().out


def test_gradcheck_corrupted_fails(tmp_path, capsys):
    cfg = write(tmp_path / "g.json", {"ablation": "unimodal:L"})
    assert main(["gradcheck", "--config", cfg, "--corrupt-gradient"]) == 4
    assert "FAILED at" in capsys.readouterr().err


def test_sweep_and_sensitivity_tables(tmp_path, data):
    cfg = write(tmp_path / "t.json", {"epochs": 1, "slave_epochs": 1, "n_folds": 1})
    grid = write(tmp_path / "grid.json", {"gamma": [0.1]})
    out = tmp_path / "grid.csv"
    assert main(["sweep", "--grid", grid, "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len([r for r in rows if r["fold"] == "mean"]) == 1
    first = out.read_bytes()
    assert main(["sweep", "--grid", grid, "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    assert out.read_bytes() == first
    assert main(["sweep", "--grid", write(tmp_path / "e.json", {}), "--config", cfg,
                 "--data", str(data)]) == 2
    assert main(["sweep", "--grid", write(tmp_path / "e2.json", {"lr": []}), "--config", cfg,
                 "--data", str(data)]) == 2
    sens = tmp_path / "sens.csv"
    assert main(["sensitivity", "--config", cfg, "--data", str(data), "--out", str(sens)]) == 0
    assert len(list(csv.DictReader(sens.open()))) == 6


def test_help_exits_zero():
    for args in ([], ["train"], ["generate"], ["gradcheck"], ["sweep"], ["sensitivity"]):
        r = subprocess.run([sys.executable, "-m", "adafuse.cli", *args, "--help"],
                           capture_output=True, text=True)
        assert r.returncode == 0 and "usage" in r.stdout


def test_threads_env_validated(tmp_path, data, monkeypatch):
    monkeypatch.setenv("ADAFUSE_THREADS", "zero")
    cfg = write(tmp_path / "t.json", {"epochs": 1, "n_folds": 1})
    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(tmp_path / "r")]) == 2
