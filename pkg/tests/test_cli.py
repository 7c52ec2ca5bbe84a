import json
from pathlib import Path

import numpy as np
import pytest

from failurenet import cli
from failurenet.baselines import read_rules
from failurenet.cli import (
    EXIT_ACCEPTANCE,
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    load_config,
)
from failurenet.evaluation import parse_report

TINY = [
    "--set", "generate.n_logs=2",
    "--set", "generate.log_duration=40",
    "--set", "train.models=lstm,cfc",
    "--set", "train.max_epochs=2",
    "--set", "train.cfc_max_epochs=2",
    "--set", "train.patience=2",
    "--set", "train.batch_size=32",
    "--set", "replay.duration=20",
]


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One generate + train + evaluate + replay at toy scale, shared."""
    out = tmp_path_factory.mktemp("tiny")
    assert run_cli(*TINY, "--seed", "5", "--out", str(out), "generate") == EXIT_OK
    assert run_cli(*TINY, "--seed", "5", "--out", str(out), "train") == EXIT_OK
    assert run_cli(*TINY, "--seed", "5", "--out", str(out), "evaluate") == EXIT_OK
    assert run_cli(*TINY, "--seed", "5", "--out", str(out), "replay") == EXIT_OK
    return out


class TestConfig:
    def test_defaults_stand_alone(self):
        cfg = load_config(None, [])
        assert cfg["sim"]["dt"] == 0.02
        assert cfg["data"]["window_len"] == 10
        assert cfg["data"]["feature_mode"] == "egocentric"
        assert cfg["map"]["half_size"] == 2.0

    def test_ini_file_overrides(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[sim]\ndt = 0.01\n[train]\nmodels = gru\ngrad_check = yes\n")
        cfg = load_config(str(path), [])
        assert cfg["sim"]["dt"] == 0.01
        assert cfg["train"]["models"] == "gru"
        assert cfg["train"]["grad_check"] is True
        assert cfg["sim"]["target_speed"] == 0.3  # untouched default

    def test_set_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[sim]\ndt = 0.01\n")
        cfg = load_config(str(path), ["sim.dt=0.005"])
        assert cfg["sim"]["dt"] == 0.005

    def test_unknown_section_and_key_rejected(self, tmp_path):
        bad1 = tmp_path / "a.ini"
        bad1.write_text("[rocket]\nfuel = 1\n")
        with pytest.raises(ConfigError, match="unknown config section"):
            load_config(str(bad1), [])
        bad2 = tmp_path / "b.ini"
        bad2.write_text("[sim]\nwarp = 9\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(str(bad2), [])

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/run.ini", [])

    def test_set_typos_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["simdt=0.01"])  # no dot
        with pytest.raises(ConfigError):
            load_config(None, ["sim.dt"])  # no equals
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(None, ["sim.dtt=0.01"])

    def test_type_coercion_failures(self):
        with pytest.raises(ConfigError, match="expected an integer"):
            load_config(None, ["data.window_len=ten"])
        with pytest.raises(ConfigError, match="expected a number"):
            load_config(None, ["sim.dt=fast"])
        with pytest.raises(ConfigError, match="expected a boolean"):
            load_config(None, ["train.grad_check=maybe"])

    def test_balanced_indices_equalize_classes(self):
        labels = np.array([1, 1, 1, 1, 1, 1, 0, 0])
        idx = cli._balanced_indices(labels, seed=3)
        assert labels[idx].sum() == 2 and (labels[idx] == 0).sum() == 2
        # single-class input falls back to everything
        assert cli._balanced_indices(np.ones(5, dtype=int), 0).size == 5

    def test_usage_exit_codes(self, capsys):
        assert run_cli("--set", "sim.dtt=1", "generate") == EXIT_USAGE
        assert run_cli("no-such-command") == EXIT_USAGE
        assert run_cli("--help") == EXIT_OK
        capsys.readouterr()


class TestMissingInputs:
    def test_train_without_dataset(self, tmp_path, capsys):
        assert run_cli("--out", str(tmp_path), "train") == EXIT_DATA
        assert "generate" in capsys.readouterr().err

    def test_evaluate_without_models(self, tiny_run, tmp_path, capsys):
        assert run_cli("--out", str(tmp_path), "evaluate") == EXIT_DATA
        capsys.readouterr()

    def test_replay_without_checkpoint(self, tmp_path, capsys):
        assert run_cli("--out", str(tmp_path), "replay") == EXIT_DATA
        assert "train" in capsys.readouterr().err

    def test_unknown_roster_model(self, tiny_run, capsys):
        code = run_cli("--set", "train.models=lstm,transformer", "--out", str(tiny_run), "train")
        assert code == EXIT_USAGE
        assert "transformer" in capsys.readouterr().err

    def test_generate_refuses_overwrite(self, tiny_run, capsys):
        code = run_cli(*TINY, "--seed", "5", "--out", str(tiny_run), "generate")
        assert code == EXIT_DATA
        assert "--force" in capsys.readouterr().err


class TestArtifacts:
    def test_generate_layout(self, tiny_run):
        logs = sorted(p.name for p in (tiny_run / "logs").glob("*.csv"))
        assert len(logs) == 10  # 5 modes x 2 logs
        assert "nominal_00.csv" in logs and "reckless_01.csv" in logs
        meta = json.loads((tiny_run / "dataset" / "meta.json").read_text())
        assert meta["window_len"] == 10
        assert set(meta["counts"]["train"]) == {"nominal", "periodic", "lane_shift", "speeding", "reckless"}
        assert set(meta["counts"]["val"]) == set(meta["counts"]["train"])

    def test_train_outputs(self, tiny_run):
        models = tiny_run / "models"
        assert (models / "lstm.ckpt").exists()
        assert (models / "cfc.ckpt").exists()
        assert not (models / "gru.ckpt").exists()  # not in the tiny roster
        rules = read_rules(models / "rules.txt")
        assert set(rules) == {"speed", "fft"}
        summary = json.loads((models / "train_summary.json").read_text())
        assert set(summary["models"]) == {"lstm", "cfc"}
        for row in summary["models"].values():
            assert row["epochs_run"] <= 2
            assert 0.0 <= row["val_accuracy"] <= 1.0

    def test_evaluate_report(self, tiny_run):
        report = parse_report(tiny_run / "reports" / "validation.csv")
        names = [m.name for m in report.methods]
        assert names == ["speed", "fft", "kalman", "lstm", "cfc"]
        for m in report.methods:
            assert 0.0 <= m.overall <= 1.0
            assert sum(m.confusion) == report.total_windows()
        assert (tiny_run / "reports" / "validation.txt").exists()

    def test_replay_outputs(self, tiny_run):
        replay = tiny_run / "replay"
        for mode in ("nominal", "periodic", "lane_shift", "speeding", "reckless"):
            assert (replay / f"events_{mode}.log").exists()
        report = parse_report(replay / "replay.csv")
        assert len(report.methods) == 1
        assert report.methods[0].name in ("lstm", "cfc")
        assert report.dataset_meta["kind"] == "online-replay"
        assert "nominal_warning_rate" in report.dataset_meta

    def test_grad_check_command(self, tmp_path, capsys):
        assert run_cli("--out", str(tmp_path), "grad-check") == EXIT_OK
        out = capsys.readouterr().out
        assert "passed" in out
        for kind in ("lstm", "gru", "cfc", "mlp"):
            assert kind in out


class TestDeterminism:
    def test_generate_twice_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli(*TINY, "--seed", "9", "--out", str(out), "generate") == EXIT_OK
        for rel in ("dataset/train.txt", "dataset/val.txt", "dataset/meta.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        log_names = sorted(p.name for p in (a / "logs").glob("*.csv"))
        for name in log_names:
            assert (a / "logs" / name).read_bytes() == (b / "logs" / name).read_bytes()

    def test_train_twice_gives_identical_checkpoints(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli(*TINY, "--seed", "9", "--out", str(out), "generate") == EXIT_OK
            assert run_cli(*TINY, "--seed", "9", "--out", str(out), "train") == EXIT_OK
        for name in ("lstm.ckpt", "cfc.ckpt", "rules.txt", "kalman.json"):
            assert (a / "models" / name).read_bytes() == (b / "models" / name).read_bytes(), name

    def test_different_seed_changes_the_data(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(*TINY, "--seed", "9", "--out", str(a), "generate") == EXIT_OK
        assert run_cli(*TINY, "--seed", "10", "--out", str(b), "generate") == EXIT_OK
        assert (a / "dataset" / "train.txt").read_bytes() != (b / "dataset" / "train.txt").read_bytes()
