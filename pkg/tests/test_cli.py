import json
import subprocess
import sys

import pytest
from conftest import tiny_cfg

from anchor import settings
from anchor.cli import main


@pytest.fixture
def run_json(tmp_path):
    cfg = {k: v for k, v in tiny_cfg(**{"pretrain.epochs": 1}).items() if v != settings.DEFAULTS[k]}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_missing_subcommand(capsys):
    assert main([]) == 1
    assert "subcommand" in capsys.readouterr().err


def test_unknown_flag(capsys, tmp_path):
    assert main(["pretrain", "--out", str(tmp_path), "--pretrain.epochz", "3"]) == 1
    assert "pretrain.epochz" in capsys.readouterr().err


def test_missing_config(capsys, tmp_path):
    assert main(["pretrain", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 1
    assert "nope.json" in capsys.readouterr().err


def test_malformed_config(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"pretrain.epochs": "many"}')
    assert main(["pretrain", "--out", str(tmp_path), "--config", str(bad)]) == 1
    assert "pretrain.epochs" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["pretrain", "--out", str(tmp_path), "--config", str(bad)]) == 1


def test_precedence():
    cfg = settings.resolve({"apt.lr": 0.5, "apt.epochs": 3}, {"apt.lr": "0.25"})
    assert (cfg["apt.lr"], cfg["apt.epochs"], cfg["baseline.lr"]) == (0.25, 3, settings.DEFAULTS["baseline.lr"])


def test_pretrain_rerun_identical_and_eval(tmp_path, run_json, capsys):
    out = tmp_path / "a"
    argv = ["pretrain", "--config", str(run_json), "--out", str(out), "--apt.epochs", "1"]
    assert main(argv) == 0
    first = (out / "metrics.jsonl").read_bytes()
    assert main(argv) == 0
    assert (out / "metrics.jsonl").read_bytes() == first
    for name in ("run-config.json", "metrics.jsonl", "pretrain.ckpt", "manifest.json"):
        assert (out / name).exists()
    resolved = json.loads((out / "run-config.json").read_text())
    assert resolved["pretrain.epochs"] == 1 and resolved["apt.epochs"] == 1
    assert json.loads((out / "manifest.json").read_text())["checkpoints"] == ["pretrain.ckpt"]
    capsys.readouterr()

    assert main(["eval", "--config", str(run_json), "--ckpt", str(out / "pretrain.ckpt"), "--eps", "0"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["robust_acc"] == res["clean_acc"]

    assert main(["apt", "--config", str(run_json), "--out", str(tmp_path / "b"),
                 "--ckpt", str(out / "pretrain.ckpt")]) == 0
    assert (tmp_path / "b" / "apt.ckpt").exists()


def test_gen_data_then_train_from_files(tmp_path, run_json, capsys):
    assert main(["gen-data", "--config", str(run_json), "--out", str(tmp_path / "d")]) == 0
    assert main(["baseline", "--config", str(run_json), "--out", str(tmp_path / "r"),
                 "--data.train_path", str(tmp_path / "d" / "train.bin"),
                 "--data.test_path", str(tmp_path / "d" / "test.bin")]) == 0
    assert "clean_acc" in capsys.readouterr().out.splitlines()[-1]


def test_runtime_failure_exit_code(tmp_path, capsys):
    assert main(["apt", "--out", str(tmp_path), "--ckpt", str(tmp_path / "missing.ckpt")]) == 2
    assert "apt failed" in capsys.readouterr().err


def test_oracle_check(capsys):
    assert main(["oracle-check", "--batches", "10"]) == 0
    assert "max absolute error" in capsys.readouterr().out


def test_gradcheck_seed_3(capsys):
    assert main(["gradcheck", "--seed", "3"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "anchor.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("anchor ")
