import os
import subprocess
import sys
from pathlib import Path

import pytest

from tip.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, read_config_file, ConfigError

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def dataset(tmp_path):
    assert main(["gen", "--n-scenes", "40", "--t-future", "10", "--seed", "2", "--out", str(tmp_path)]) == 0
    return tmp_path / "dataset.jsonl"


def test_gen_writes_dataset(dataset, capsys):
    from tip.simgen import read_dataset

    scenes = read_dataset(dataset)
    assert len(scenes) == 40 and scenes[0].future_xy.shape[1] == 10


def test_unknown_flag_is_config_error():
    assert main(["gen", "--bogus", "1"]) == EXIT_CONFIG


def test_missing_subcommand():
    assert main([]) == EXIT_CONFIG


def test_help_exits_ok(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "sweep-alpha" in capsys.readouterr().out


def test_bad_config_values(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = many\n")
    assert main(["train", "--config", str(cfg), "--data", "x"]) == EXIT_CONFIG
    cfg.write_text("no_such_key = 1\n")
    assert main(["gen", "--config", str(cfg)]) == EXIT_CONFIG
    cfg.write_text("just words\n")
    assert main(["gen", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["gen", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_invalid_generator_settings(tmp_path):
    assert main(["gen", "--n-scenes", "-3", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_data_is_config_error(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_runtime_failures(tmp_path, dataset):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == EXIT_RUNTIME
    broken = tmp_path / "broken.jsonl"
    broken.write_text(dataset.read_text()[:-50])
    assert main(["train", "--data", str(broken), "--epochs", "1", "--out", str(tmp_path)]) == EXIT_RUNTIME
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(dataset), "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_config_file_then_eval(tmp_path, dataset):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"# small run\nepochs = 1\nk_samples = 2\ndata = {dataset}\nalpha = 5\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "model.ckpt").exists() and (out / "train_log.txt").read_text().count("\n") == 1
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(dataset),
                 "--out", str(out)]) == EXIT_OK
    assert "auc_roc=" in (out / "report.txt").read_text()


def test_flags_override_config(tmp_path, dataset):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 3\n")
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--data", str(dataset),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "train_log.txt").read_text().count("\n") == 1


def test_sweeps(tmp_path, dataset):
    assert main(["sweep-alpha", "--data", str(dataset), "--alphas", "0,5", "--epochs", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "alpha_sweep.csv").read_text().count("\n") == 3
    assert main(["sweep-k", "--data", str(dataset), "--ks", "1", "--epochs", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert main(["noise-robustness", "--data", str(dataset), "--sigmas", "0,0.25", "--epochs", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert main(["sweep-k", "--data", str(dataset), "--ks", "1,x"]) == EXIT_CONFIG


@pytest.mark.parametrize("name", ["warning.cfg", "planning.cfg"])
def test_shipped_configs_parse(name):
    from tip.cli import _field_names, build_config
    from tip.harness import TrainConfig
    from tip.simgen import GeneratorConfig

    values = read_config_file(ROOT / "configs" / name)
    assert set(values) <= _field_names(TrainConfig, GeneratorConfig)
    build_config(TrainConfig, values)
    build_config(GeneratorConfig, values)


def test_read_config_file_errors(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text(" = 3\n")
    with pytest.raises(ConfigError, match=":1: empty key"):
        read_config_file(p)


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=str(ROOT / "src"))
    proc = subprocess.run([sys.executable, "-m", "tip", "gen", "--bogus"], env=env,
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
