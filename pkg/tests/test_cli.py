"""End-to-end CLI coverage: every subcommand plus the exit-code contract.

Runs tiny configurations (8-dim state, 32x32 frames, 3 samples per domain)
so the whole file stays in the seconds range.
"""

import os

import numpy as np
import pytest

from ncaseg import container
from ncaseg.cli import main
from ncaseg.config import load_config
from ncaseg.datagen import load_dataset

TINY_TOML = """\
seed = 5
n_per_domain = 3
image_size = [32, 32]
state_dim = 8
hidden_dim = 16
epochs = 2
batch_size = 4
t_min = 2
t_max = 4
t_eval = 3
lr = 1e-3
grad_clip = 1.0
grad_chunk = 4
val_fraction = 0.34
n_runs = 1
targets = ["vendor_c"]
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.toml"
    cfg.write_text(TINY_TOML)
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(ws):
    out = ws / "run"
    rc = main(
        ["train", "--config", str(ws / "cfg.toml"), "--data", str(ws / "data"), "--out", str(out)]
    )
    assert rc == 0
    return out


class TestGenData:
    def test_layout_and_config_echo(self, ws):
        data = ws / "data"
        assert (data / "manifest.json").exists()
        echoed = load_config(data / "config.toml")
        assert echoed.n_per_domain == 3
        assert echoed.image_size == [32, 32]
        samples = load_dataset(data)
        assert len(samples) == 9
        assert sorted({s.domain for s in samples}) == ["vendor_a", "vendor_b", "vendor_c"]

    def test_rerun_is_bit_identical(self, ws, tmp_path):
        rc = main(["gen-data", "--config", str(ws / "cfg.toml"), "--out", str(tmp_path / "d2")])
        assert rc == 0
        a = (ws / "data" / "manifest.json").read_bytes()
        assert (tmp_path / "d2" / "manifest.json").read_bytes() == a
        name = os.path.join("images", "vendor_b_0001.ncat")
        assert (tmp_path / "d2" / name).read_bytes() == (ws / "data" / name).read_bytes()


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "checkpoints" / "best.ncat").exists()
        # epochs are zero-based on disk
        assert (trained / "checkpoints" / "epoch_0001.ncat").exists()
        log = (trained / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,split,metric,value,seed,run_id"
        assert (trained / "config.toml").exists()

    def test_same_seed_reruns_bit_identical(self, ws, tmp_path, capsys):
        argv = ["train", "--config", str(ws / "cfg.toml"), "--data", str(ws / "data")]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert "best epoch" in capsys.readouterr().out
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        best = lambda d: (tmp_path / d / "checkpoints" / "best.ncat").read_bytes()  # noqa: E731
        assert best("a") == best("b")
        log = lambda d: (tmp_path / d / "train_log.csv").read_text()  # noqa: E731
        assert log("a") == log("b")

    def test_resume_continues_epoch_numbering(self, ws, trained, tmp_path):
        cfg3 = tmp_path / "cfg3.toml"
        cfg3.write_text(TINY_TOML.replace("epochs = 2", "epochs = 3"))
        rc = main(
            [
                "train",
                "--config",
                str(cfg3),
                "--data",
                str(ws / "data"),
                "--out",
                str(tmp_path / "resumed"),
                "--resume",
                str(trained / "checkpoints" / "epoch_0001.ncat"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "resumed" / "checkpoints" / "epoch_0002.ncat").exists()

    def test_resume_from_weights_only_checkpoint_fails(self, ws, trained, capsys):
        rc = main(
            [
                "train",
                "--config",
                str(ws / "cfg.toml"),
                "--data",
                str(ws / "data"),
                "--out",
                str(trained) + "_r",
                "--resume",
                str(trained / "checkpoints" / "best.ncat"),
            ]
        )
        assert rc == 5
        assert "no optimizer state" in capsys.readouterr().err

    def test_resume_architecture_mismatch_fails(self, ws, trained, tmp_path):
        cfg = tmp_path / "wide.toml"
        cfg.write_text(TINY_TOML.replace("state_dim = 8", "state_dim = 12"))
        rc = main(
            [
                "train",
                "--config",
                str(cfg),
                "--data",
                str(ws / "data"),
                "--out",
                str(tmp_path / "w"),
                "--resume",
                str(trained / "checkpoints" / "epoch_0001.ncat"),
            ]
        )
        assert rc == 5


class TestEval:
    def test_writes_csv_and_prints_mean(self, ws, trained, tmp_path, capsys):
        out = tmp_path / "ev"
        rc = main(
            [
                "eval",
                "--config",
                str(ws / "cfg.toml"),
                "--checkpoint",
                str(trained / "checkpoints" / "best.ncat"),
                "--data",
                str(ws / "data"),
                "--out",
                str(out),
                "--t-eval",
                "2",
            ]
        )
        assert rc == 0
        assert "mean foreground dice" in capsys.readouterr().out
        lines = (out / "eval.csv").read_text().splitlines()
        assert lines[0] == "sample_id,domain,dice"
        assert len(lines) == 1 + 9
        sid, domain, score = lines[1].split(",")
        assert domain in sid and 0.0 <= float(score) <= 1.0

    def test_domain_filter(self, ws, trained, tmp_path):
        out = tmp_path / "ev"
        argv = [
            "eval",
            "--config",
            str(ws / "cfg.toml"),
            "--checkpoint",
            str(trained / "checkpoints" / "best.ncat"),
            "--data",
            str(ws / "data"),
            "--out",
            str(out),
            "--t-eval",
            "2",
        ]
        assert main(argv + ["--domains", "vendor_a"]) == 0
        assert len((out / "eval.csv").read_text().splitlines()) == 1 + 3
        assert main(argv + ["--domains", "vendor_a,vendor_x"]) == 2

    def test_missing_checkpoint_is_io_error(self, ws, tmp_path):
        rc = main(
            [
                "eval",
                "--config",
                str(ws / "cfg.toml"),
                "--checkpoint",
                str(tmp_path / "absent.ncat"),
                "--data",
                str(ws / "data"),
                "--out",
                str(tmp_path / "ev"),
            ]
        )
        assert rc == 3

    def test_corrupt_checkpoint_is_checkpoint_error(self, ws, tmp_path, capsys):
        bad = tmp_path / "bad.ncat"
        bad.write_bytes(b"this is not a tensor container")
        rc = main(
            [
                "eval",
                "--config",
                str(ws / "cfg.toml"),
                "--checkpoint",
                str(bad),
                "--data",
                str(ws / "data"),
                "--out",
                str(tmp_path / "ev"),
            ]
        )
        assert rc == 5
        assert "checkpoint error" in capsys.readouterr().err


class TestConfigErrors:
    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("warmup_epochs = 5\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_architecture_exits_2(self, ws, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(TINY_TOML.replace("state_dim = 8", "state_dim = 4"))
        rc = main(
            [
                "train",
                "--config",
                str(cfg),
                "--data",
                str(ws / "data"),
                "--out",
                str(tmp_path / "o"),
            ]
        )
        assert rc == 2

    def test_missing_dataset_is_io_error(self, ws, tmp_path):
        rc = main(
            [
                "train",
                "--config",
                str(ws / "cfg.toml"),
                "--data",
                str(tmp_path / "nothing_here"),
                "--out",
                str(tmp_path / "o"),
            ]
        )
        assert rc == 3

    def test_argparse_rejects_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
        with pytest.raises(SystemExit):
            main(["eval"])  # --checkpoint is required


class TestGradcheck:
    def test_clean_run_passes(self, tmp_path, capsys):
        rc = main(["gradcheck", "--seeds", "2", "--out", str(tmp_path / "g")])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("max_rel_error") == 2
        assert "gradcheck PASS" in out

    def test_corrupted_gradient_fails(self, tmp_path, capsys):
        rc = main(
            ["gradcheck", "--seeds", "1", "--corrupt", "0.01", "--out", str(tmp_path / "g")]
        )
        assert rc == 1
        assert "gradcheck FAIL" in capsys.readouterr().out


class TestRollout:
    def test_frames_written(self, ws, trained, tmp_path):
        sample = load_dataset(ws / "data")[0]
        img_path = tmp_path / "img.ncat"
        container.write_tensor(img_path, sample.image)
        out = tmp_path / "ro"
        rc = main(
            [
                "rollout",
                "--config",
                str(ws / "cfg.toml"),
                "--checkpoint",
                str(trained / "checkpoints" / "best.ncat"),
                "--image",
                str(img_path),
                "--steps",
                "3",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        frames = sorted(p.name for p in out.glob("frame_*.pgm"))
        assert frames == [f"frame_{t:04d}.pgm" for t in range(4)]
        head = (out / "frame_0000.pgm").read_bytes()
        assert head.startswith(b"P5\n32 32\n255\n")
        assert len(head) == len(b"P5\n32 32\n255\n") + 32 * 32

    def test_wrong_image_rank_exits_2(self, ws, trained, tmp_path):
        img_path = tmp_path / "flat.ncat"
        container.write_tensor(img_path, np.zeros((32, 32), dtype=np.float32))
        rc = main(
            [
                "rollout",
                "--config",
                str(ws / "cfg.toml"),
                "--checkpoint",
                str(trained / "checkpoints" / "best.ncat"),
                "--image",
                str(img_path),
                "--out",
                str(tmp_path / "ro"),
            ]
        )
        assert rc == 2


class TestLogo:
    def test_single_target_experiment(self, ws, tmp_path, capsys):
        out = tmp_path / "logo"
        rc = main(
            [
                "logo",
                "--config",
                str(ws / "cfg.toml"),
                "--data",
                str(ws / "data"),
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        assert "mean OOD" in printed and "mean IID" in printed
        lines = (out / "report.csv").read_text().splitlines()
        assert lines[0] == "target,run,split,dice,excluded"
        assert len(lines) == 1 + 2  # one run, iid + ood rows
        assert all(line.startswith("vendor_c,0,") for line in lines[1:])
        assert (out / "report.txt").exists()
        assert (out / "runs" / "vendor_c" / "run0" / "train_log.csv").exists()
