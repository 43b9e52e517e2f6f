import json

import numpy as np
import pytest

from intff.cli import main
from intff.data import load_idx_images, load_idx_labels
from intff.evaluate import parse_report_csv


def run_cli(*argv):
    return main(list(argv))


class TestChecksCommands:
    def test_gradcheck_passes(self, capsys):
        assert run_cli("gradcheck", "--instances", "3") == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 7
        assert "FAIL" not in out

    def test_oracle_check_passes(self, capsys):
        assert run_cli("oracle-check", "--models", "5") == 0
        out = capsys.readouterr().out
        assert "worst deviation" in out


class TestTrainEval:
    ARGS = ("--arch", "784,16,12", "--epochs", "2", "--seed", "3", "--batch", "16")

    def test_train_writes_model_metrics_manifest(self, tiny_idx_dir, tmp_path, capsys):
        out = tmp_path / "model.json"
        metrics = tmp_path / "metrics.csv"
        code = run_cli("train", "--algo", "intff", *self.ARGS,
                       "--data-dir", str(tiny_idx_dir),
                       "--out", str(out), "--metrics", str(metrics))
        assert code == 0
        assert out.exists() and metrics.exists()
        manifest_path = tmp_path / "model.manifest.json"
        assert manifest_path.exists()
        manifest = json.loads(manifest_path.read_text())
        assert manifest["config"]["arch"] == "784,16,12"
        assert manifest["config"]["seed"] == 3
        assert set(manifest["dataset"]["checksums"]) == {
            "train-images-idx3-ubyte", "train-labels-idx1-ubyte"}

    def test_train_deterministic_and_manifest_replay(self, tiny_idx_dir, tmp_path):
        o1, m1 = tmp_path / "a.json", tmp_path / "a.csv"
        o2, m2 = tmp_path / "b.json", tmp_path / "b.csv"
        o3, m3 = tmp_path / "c.json", tmp_path / "c.csv"
        assert run_cli("train", *self.ARGS, "--data-dir", str(tiny_idx_dir),
                       "--out", str(o1), "--metrics", str(m1)) == 0
        assert run_cli("train", *self.ARGS, "--data-dir", str(tiny_idx_dir),
                       "--out", str(o2), "--metrics", str(m2)) == 0
        assert o1.read_bytes() == o2.read_bytes()
        assert m1.read_bytes() == m2.read_bytes()
        # replay from the emitted manifest, no other flags
        assert run_cli("train", "--manifest", str(tmp_path / "a.manifest.json"),
                       "--out", str(o3), "--metrics", str(m3)) == 0
        assert o1.read_bytes() == o3.read_bytes()
        assert m1.read_bytes() == m3.read_bytes()

    def test_eval_report(self, tiny_idx_dir, tmp_path, capsys):
        out = tmp_path / "model.json"
        assert run_cli("train", *self.ARGS, "--data-dir", str(tiny_idx_dir),
                       "--out", str(out), "--metrics", str(tmp_path / "m.csv")) == 0
        report = tmp_path / "report.csv"
        code = run_cli("eval", "--model", str(out),
                       "--test-dir", str(tiny_idx_dir), "--report", str(report))
        assert code == 0
        parsed = parse_report_csv(report)
        assert parsed.sample_count == 20
        assert 0.0 <= parsed.accuracy <= 1.0

    def test_bp_roundtrip(self, tiny_idx_dir, tmp_path):
        out = tmp_path / "bp.json"
        assert run_cli("train", "--algo", "bp", *self.ARGS,
                       "--data-dir", str(tiny_idx_dir),
                       "--out", str(out), "--metrics", str(tmp_path / "m.csv")) == 0
        assert run_cli("eval", "--model", str(out), "--test-dir", str(tiny_idx_dir),
                       "--report", str(tmp_path / "r.csv")) == 0


class TestConfigFile:
    def test_empty_file_gives_defaults(self, tiny_idx_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("")
        out = tmp_path / "model.json"
        # defaults would run 15 epochs on arch 784,(100,50),(30,10); override
        # epochs/arch by flags and keep the rest default
        code = run_cli("train", "--config", str(cfg), "--arch", "784,8", "--epochs", "1",
                       "--data-dir", str(tiny_idx_dir), "--out", str(out),
                       "--metrics", str(tmp_path / "m.csv"))
        assert code == 0
        manifest = json.loads((tmp_path / "model.manifest.json").read_text())
        assert manifest["config"]["theta"] == 1.5
        assert manifest["config"]["lr"] == 1e-3
        assert manifest["config"]["batch_size"] == 64

    def test_flag_overrides_file(self, tiny_idx_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"arch": "784,8", "epochs": 1, "lr": 0.5}))
        out = tmp_path / "model.json"
        code = run_cli("train", "--config", str(cfg), "--lr", "0.001",
                       "--data-dir", str(tiny_idx_dir), "--out", str(out),
                       "--metrics", str(tmp_path / "m.csv"))
        assert code == 0
        manifest = json.loads((tmp_path / "model.manifest.json").read_text())
        assert manifest["config"]["lr"] == 0.001

    def test_unknown_key_named(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"thetta": 1.5}))
        code = run_cli("train", "--config", str(cfg))
        assert code == 1
        err = capsys.readouterr().err
        assert "thetta" in err
        assert len(err.strip().splitlines()) == 1

    def test_wrong_value_type_exits_one(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": "ten"}))
        code = run_cli("train", "--config", str(cfg))
        assert code == 1
        assert len(capsys.readouterr().err.strip().splitlines()) == 1


class TestErrorPaths:
    def test_unknown_flag_single_line(self, capsys):
        code = run_cli("train", "--bogus-flag", "1")
        assert code == 1
        err = capsys.readouterr().err
        assert len(err.strip().splitlines()) == 1

    def test_bad_arch_exits_one(self, capsys):
        code = run_cli("train", "--arch", "784,(100")
        assert code == 1
        assert "offset" in capsys.readouterr().err

    def test_missing_data_exits_two(self, tmp_path, capsys):
        code = run_cli("train", "--arch", "784,8", "--epochs", "1",
                       "--data-dir", str(tmp_path / "nowhere"),
                       "--out", str(tmp_path / "m.json"),
                       "--metrics", str(tmp_path / "m.csv"))
        assert code == 2
        assert len(capsys.readouterr().err.strip().splitlines()) == 1

    def test_numerical_abort_exits_three(self, tiny_idx_dir, tmp_path, capsys):
        with np.errstate(over="ignore", invalid="ignore"):
            code = run_cli("train", "--arch", "784,8", "--epochs", "1",
                           "--batch", "8", "--lr", "1e200",
                           "--data-dir", str(tiny_idx_dir),
                           "--out", str(tmp_path / "m.json"),
                           "--metrics", str(tmp_path / "m.csv"))
        assert code == 3

    def test_unreachable_mirror_exits_two(self, tmp_path, capsys):
        code = run_cli("fetch-data", "--out", str(tmp_path / "d"),
                       "--mirror", "http://localhost:1")
        assert code == 2
        assert len(capsys.readouterr().err.strip().splitlines()) == 1


class TestCorrupt:
    def test_writes_idx_back(self, tiny_idx_dir, tmp_path, capsys):
        out_dir = tmp_path / "corrupted"
        profile = tmp_path / "profile.json"
        profile.write_text(json.dumps({"gaussian_sigma": 0.2}))
        code = run_cli("corrupt", "--in", str(tiny_idx_dir), "--profile", str(profile),
                       "--seed", "5", "--out", str(out_dir))
        assert code == 0
        images = load_idx_images(out_dir / "train-images-idx3-ubyte")
        labels = load_idx_labels(out_dir / "train-labels-idx1-ubyte")
        assert images.shape == (40, 784)
        assert labels.shape == (40,)
        assert "types" in capsys.readouterr().out

    def test_deterministic(self, tiny_idx_dir, tmp_path):
        d1, d2 = tmp_path / "c1", tmp_path / "c2"
        for d in (d1, d2):
            assert run_cli("corrupt", "--in", str(tiny_idx_dir),
                           "--seed", "5", "--out", str(d)) == 0
        assert (d1 / "train-images-idx3-ubyte").read_bytes() == \
               (d2 / "train-images-idx3-ubyte").read_bytes()


class TestCompare:
    def test_emits_three_rows(self, tiny_idx_dir, tmp_path, capsys):
        out = tmp_path / "summary.csv"
        code = run_cli("compare", "--arch", "784,(12,8)", "--epochs", "1",
                       "--data-dir", str(tiny_idx_dir), "--seed", "1",
                       "--out", str(out))
        assert code == 0
        stdout = capsys.readouterr().out
        for algo in ("intff", "ff", "bp"):
            assert algo in stdout
        lines = out.read_text().splitlines()
        assert lines[0] == "algorithm,network_type,network_size,testing_accuracy"
        assert len(lines) == 4
        assert lines[1].startswith('intff,Dense,"784,(12,8)"')
        assert lines[2].startswith('ff,Dense,"784,12,8"')
        assert lines[3].startswith('bp,Dense,"784,12,8"')


class TestHelp:
    def test_help_exits_zero(self, capsys):
        assert run_cli("--help") == 0
        assert "fetch-data" in capsys.readouterr().out
