import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from seizure_lstm import cli, dataio, noise
from seizure_lstm.errors import ConfigError

FAST = ["--synthetic", "--epochs", "2", "--lstm-units", "4", "--dense-units", "3", "--batch-size", "32"]


def run(args):
    return cli.main([str(a) for a in args])


def test_version():
    out = subprocess.run([sys.executable, "-m", "seizure_lstm", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().endswith("0.1.0")


class TestIngest:
    def test_summary_and_rerun(self, bonn_tree, tmp_path):
        out = tmp_path / "out"
        assert run(["ingest", "--manifest", bonn_tree, "--out", out]) == 0
        first = (out / "ingest_summary.json").read_bytes()
        doc = json.loads(first)
        assert doc["total"] == 15 and doc["N"] == [4096]
        assert {s: v["count"] for s, v in doc["sets"].items()} == dict.fromkeys("ABCDE", 3)
        assert run(["ingest", "--manifest", bonn_tree, "--out", out]) == 0
        assert (out / "ingest_summary.json").read_bytes() == first

    def test_empty_set_exits_2(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        (tmp_path / "m.json").write_text(json.dumps({"D": "empty"}))
        assert run(["ingest", "--manifest", tmp_path / "m.json", "--out", tmp_path / "o"]) == 2
        assert "set D" in capsys.readouterr().err

    def test_parse_error_exits_3(self, tmp_path):
        (tmp_path / "A").mkdir()
        (tmp_path / "A" / "x.txt").write_text("1\nfoo\n")
        (tmp_path / "m.json").write_text(json.dumps({"A": "A"}))
        assert run(["ingest", "--manifest", tmp_path / "m.json", "--out", tmp_path / "o"]) == 3


class TestSynth:
    @pytest.fixture
    def clean(self, tmp_path):
        path = tmp_path / "clean.txt"
        x = np.random.default_rng(0).integers(-300, 300, size=4096)
        dataio.write_signal_file(path, x)
        return path, x.astype(float)

    def test_snr_and_determinism(self, clean, tmp_path):
        path, x = clean
        args = ["synth", "--input", path, "--kind", "muscle", "--snr", "-10", "--seed", "7"]
        assert run(args + ["--output", tmp_path / "a.txt"]) == 0
        assert run(args + ["--output", tmp_path / "b.txt"]) == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        noisy = dataio.read_signal_file(tmp_path / "a.txt")
        assert abs(noise.snr_db(x, noisy - x) - (-10.0)) <= 1e-6

    def test_eyeblink_band(self, clean, tmp_path):
        path, x = clean
        assert run(["synth", "--input", path, "--kind", "eyeblink", "--snr", "0", "--output", tmp_path / "n.txt",
                    "--dump-noise", tmp_path / "d.txt"]) == 0
        diff = dataio.read_signal_file(tmp_path / "n.txt") - x
        assert noise.band_power_fraction(diff, dataio.SAMPLING_RATE_HZ, 0.5, 3.5) >= 0.90
        np.testing.assert_allclose(diff, dataio.read_signal_file(tmp_path / "d.txt"), atol=1e-9)

    def test_missing_args(self, tmp_path):
        assert run(["synth", "--kind", "white", "--snr", "0"]) == 2


class TestTrainEval:
    def test_train_writes_outputs(self, tmp_path):
        out = tmp_path / "run"
        assert run(["train", *FAST, "--out", out, "--checkpoint"]) == 0
        doc = json.loads((out / "run.json").read_text())
        assert doc["problem"] == "A-E" and doc["split"]["kind"] == "holdout"
        rows = list(csv.DictReader(open(out / "table.csv")))
        assert list(rows[0]) == ["Method", "Classifier", "Training/Testing", "Sens", "Spec", "Acc"]
        ckpt = out / "checkpoints" / "fold000.npz"
        assert ckpt.exists()
        assert run(["eval", "--synthetic", "--checkpoint", ckpt, "--out", out]) == 0
        ev = json.loads((out / "eval.json").read_text())
        assert ev["metrics"]["accuracy"] == doc["folds"][0]["accuracy"]

    def test_bitwise_rerun(self, tmp_path):
        for name in ("a", "b"):
            assert run(["train", *FAST, "--seed", "3", "--out", tmp_path / name]) == 0
        assert (tmp_path / "a" / "run.json").read_bytes() == (tmp_path / "b" / "run.json").read_bytes()

    def test_no_manifest(self, tmp_path):
        assert run(["train", "--epochs", "1", "--out", tmp_path]) == 2

    def test_bad_segment_length(self, tmp_path):
        assert run(["train", *FAST, "--segment-length", "3", "--out", tmp_path]) == 2


class TestSweep:
    def test_snr_csv(self, tmp_path):
        assert run(["sweep", *FAST, "--epochs", "1", "--kinds", "white", "--out", tmp_path]) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep_snr.csv")))
        assert len(rows) == 9
        assert [float(r["snr_db"]) for r in rows] == [-20, -15, -10, -5, 0, 5, 10, 15, 20]
        assert json.loads((tmp_path / "sweep_snr.json").read_text())["axis"] == "snr_db"

    def test_segment_length_axis(self, tmp_path):
        assert run(["sweep", *FAST, "--epochs", "1", "--axis", "segment-length", "--L-values", "2", "16",
                    "--out", tmp_path]) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep_segment_length.csv")))
        assert [r["segment_length"] for r in rows] == ["2", "16"]


class TestConfigPrecedence:
    def test_flag_over_file_over_default(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 3, "lstm_units": 5, "seed": 11}))
        args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "1"])
        s = cli.resolve(args)
        config = cli.train_config(s)
        assert config.epochs == 1  # flag
        assert config.lstm_units == 5 and config.seed == 11  # file
        assert config.dense_units == 50 and s["split"] == "holdout:0.8"  # defaults

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 1, "lstm_unit": 5}))
        with pytest.raises(ConfigError, match="lstm_unit"):
            cli.read_config_file(cfg)
        assert run(["train", "--synthetic", "--config", cfg, "--out", tmp_path]) == 2

    def test_outputs_stay_under_out(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(["train", *FAST, "--out", "nested/dir"]) == 0
        produced = sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file())
        assert produced == ["nested/dir/run.json", "nested/dir/table.csv"]


def test_gradcheck_passes(tmp_path):
    assert run(["gradcheck", "--models", "3", "--out", tmp_path]) == 0
    doc = json.loads((tmp_path / "gradcheck.json").read_text())
    assert doc["passed"] and doc["max_rel_error"] <= 1e-4 and len(doc["models"]) == 3


def test_gradcheck_impossible_tolerance_fails(tmp_path):
    assert run(["gradcheck", "--models", "1", "--tolerance", "1e-300", "--out", tmp_path]) == 1
