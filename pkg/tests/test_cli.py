import csv
import subprocess
import sys

import numpy as np
import pytest

from gmmsep import cli
from gmmsep.wavio import read_wav


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Synthetic manifests plus a one-epoch desk checkpoint, all made through the CLI."""
    w = tmp_path_factory.mktemp("cli")
    for split, count, seed in (("train", 12, 1), ("val", 4, 2), ("test", 2, 3)):
        assert run("mixgen", "--synthetic", "--split", split, "--count", count, "--duration", 0.5,
                   "--sample-rate", 16000, "--seed", seed, "--songs", 4, "--out", w / split) == 0
    assert run("train", "--preset", "desk", "--max-epochs", 1, "--train-manifest",
               w / "train/manifest.jsonl", "--val-manifest", w / "val/manifest.jsonl",
               "--out", w / "run") == 0
    return w


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("gmmsep: error: ")
    return err[0]


class TestMixgen:
    def test_same_seed_same_manifest(self, tmp_path):
        for _ in range(2):
            assert run("mixgen", "--synthetic", "--count", 10, "--seed", 7, "--duration", 0.5,
                       "--sample-rate", 8000, "--out", tmp_path / "m") == 0
            data = (tmp_path / "m" / "manifest.jsonl").read_bytes()
            if _ == 0:
                first = data
        assert data == first

    def test_synthetic_wav_sets(self, work):
        lines = (work / "train" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 12
        for d in (p for p in (work / "train").iterdir() if p.name.startswith("train-")):
            clips = {f.stem: read_wav(f) for f in d.glob("*.wav")}
            assert set(clips) == {"mixture", "vocals", "drums", "bass", "other"}
            assert all(c.num_samples == 8000 for c in clips.values())

    def test_missing_class(self, work, tmp_path, capsys):
        bank = tmp_path / "bank" / "song"
        bank.mkdir(parents=True)
        for c in ("vocals", "drums", "other"):
            src = next((work / "train" / "stems" / "train").iterdir()) / f"{c}.wav"
            (bank / f"{c}.wav").write_bytes(src.read_bytes())
        code = run("mixgen", "--bank", tmp_path / "bank", "--count", 2, "--duration", 0.5,
                   "--sample-rate", 16000, "--out", tmp_path / "o")
        assert code == 2
        assert "'bass'" in error_line(capsys)
        assert not (tmp_path / "o").exists()

    def test_needs_a_source(self, tmp_path, capsys):
        assert run("mixgen", "--out", tmp_path / "o") == 2
        error_line(capsys)


class TestTrain:
    def test_outputs(self, work):
        assert (work / "run" / "best.npz").exists()
        with open(work / "run" / "train_log.csv") as f:
            assert len(list(csv.DictReader(f))) == 1

    def test_baseline(self, work):
        from gmmsep.separator import load_model
        assert run("train", "--preset", "desk", "--baseline", "--max-epochs", 1,
                   "--train-manifest", work / "train/manifest.jsonl",
                   "--val-manifest", work / "val/manifest.jsonl", "--out", work / "base") == 0
        assert load_model(work / "base" / "best.npz").is_baseline

    def test_config_file_and_flags(self, work, tmp_path):
        from gmmsep.system import load_checkpoint
        cfg = tmp_path / "c.txt"
        cfg.write_text("covariance = diag\nmax_epochs = 1\nseed = 4\n")
        assert run("train", "--preset", "desk", "--config", cfg, "--covariance", "sphr",
                   "--train-manifest", work / "train/manifest.jsonl",
                   "--val-manifest", work / "val/manifest.jsonl", "--out", tmp_path / "r") == 0
        _, header = load_checkpoint(tmp_path / "r" / "best.npz")
        echoed = header["extra"]["train_config"]
        assert echoed["covariance"] == "sphr" and echoed["seed"] == 4
        assert header["covariance"] == "sphr"

    def test_invalid_covariance(self, work, capsys):
        assert run("train", "--covariance", "full", "--train-manifest", "a",
                   "--val-manifest", "b", "--out", "c") == 2
        assert "full" in error_line(capsys)

    def test_bad_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("learning_rat = 1\n")
        assert run("train", "--config", cfg, "--train-manifest", "a", "--val-manifest", "b",
                   "--out", "c") == 2
        assert "learning_rat" in error_line(capsys)


class TestInference:
    def test_separate(self, work, tmp_path):
        assert run("separate", "--checkpoint", work / "run/best.npz",
                   "--in", work / "test/test-00000/mixture.wav", "--out-dir", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
            ["vocals.wav", "drums.wav", "bass.wav", "other.wav"])

    def test_query(self, work, tmp_path):
        out = tmp_path / "q.wav"
        assert run("query", "--checkpoint", work / "run/best.npz",
                   "--query", work / "test/test-00001/drums.wav",
                   "--mixture", work / "test/test-00000/mixture.wav", "--out", out) == 0
        assert read_wav(out).num_samples == 8000

    def test_evaluate(self, work, tmp_path, capsys):
        report = tmp_path / "rep.csv"
        assert run("evaluate", "--checkpoint", work / "run/best.npz", work / "base/best.npz",
                   "--manifest", work / "test/manifest.jsonl", "--report", report) == 0
        with open(report) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["approach", "Vocals", "Drums", "Bass", "Other"]
        assert [r[0] for r in rows[1:]] == ["Mixture (no separation)", "BLSTM",
                                            "DC/GMM - sphr. (tied)"]
        assert "BLSTM" in capsys.readouterr().out

    def test_inspect(self, work, tmp_path):
        assert run("inspect", "--checkpoint", work / "run/best.npz",
                   "--in", work / "test/test-00000/mixture.wav", "--out", tmp_path / "v") == 0
        assert (tmp_path / "v" / "pca.csv").exists()
        assert len(list((tmp_path / "v").glob("dim_*.csv"))) == 8

    def test_deterministic(self, work, tmp_path):
        for name in ("a", "b"):
            run("separate", "--checkpoint", work / "run/best.npz", "--seed", 3,
                "--in", work / "test/test-00000/mixture.wav", "--out-dir", tmp_path / name)
        assert (tmp_path / "a/drums.wav").read_bytes() == (tmp_path / "b/drums.wav").read_bytes()


class TestFailures:
    def test_missing_checkpoint(self, work, tmp_path, capsys):
        assert run("separate", "--checkpoint", tmp_path / "nope.npz",
                   "--in", work / "test/test-00000/mixture.wav", "--out-dir", tmp_path / "o") == 2
        assert "does not exist" in error_line(capsys)
        assert not (tmp_path / "o").exists()

    def test_corrupt_checkpoint(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a checkpoint")
        assert run("separate", "--checkpoint", bad,
                   "--in", work / "test/test-00000/mixture.wav", "--out-dir", tmp_path / "o") == 2
        error_line(capsys)

    def test_runtime_failure_cleans_up(self, work, tmp_path, capsys, monkeypatch):
        import gmmsep.separator as sep
        real = sep.separate

        def broken(*a, **k):
            real(*a, **k)
            raise RuntimeError("disk on fire")

        monkeypatch.setattr(sep, "separate", broken)
        out = tmp_path / "o"
        assert run("separate", "--checkpoint", work / "run/best.npz",
                   "--in", work / "test/test-00000/mixture.wav", "--out-dir", out) == 1
        assert "disk on fire" in error_line(capsys)
        assert not out.exists()

    def test_query_with_baseline(self, work, tmp_path, capsys):
        assert run("query", "--checkpoint", work / "base/best.npz",
                   "--query", work / "test/test-00001/drums.wav",
                   "--mixture", work / "test/test-00000/mixture.wav",
                   "--out", tmp_path / "q.wav") == 2
        assert "baseline" in error_line(capsys)

    def test_bad_number(self, capsys):
        assert run("mixgen", "--synthetic", "--count", 0, "--out", "x") == 2
        error_line(capsys)

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "gmmsep", "separate"], capture_output=True,
                           text=True)
        assert r.returncode == 2
        assert r.stderr.startswith("gmmsep: error:")
