import numpy as np
import pytest

from dystream import checkpoint
from dystream.cli import main
from dystream.config import build_run_config, merge_settings, parse_config_file
from dystream.streaming import ModelBundle
from dystream.tensor import RngState

TINY = [
    "--set", "enc.model_dim=16", "--set", "enc.heads=2",
    "--set", "gen.ar_dim=16", "--set", "gen.ar_heads=2",
    "--set", "gen.head_dim=16", "--set", "gen.head_blocks=1",
    "--set", "gen.window=12",
    "--set", "synth.episodes=3", "--set", "synth.frames=16",
    "--set", "train.steps=2", "--set", "train.batch=2",
    "--set", "pretrain.steps=2", "--set", "distill.steps=2",
    "--set", "eval.episodes=1", "--set", "eval.frames=60",
]


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = RngState(0)
        tensors = {
            "a.w": rng.normal((3, 4)).astype(np.float32).astype(np.float64),
            "b": rng.normal(7).astype(np.float32).astype(np.float64),
            "scalarish": np.float32(rng.normal(())).astype(np.float64).reshape(()),
        }
        config = {"k1": "v1", "nested.key": "2e-4"}
        path = tmp_path / "x.dyst"
        checkpoint.save(path, config, tensors)
        cfg2, t2 = checkpoint.load(path)
        assert cfg2 == config
        assert set(t2) == set(tensors)
        for k in tensors:
            assert np.array_equal(np.asarray(tensors[k]), t2[k])

    def test_save_of_loaded_file_is_byte_identical(self, tmp_path):
        rng = RngState(1)
        tensors = {"w": rng.normal((5, 5)).astype(np.float32).astype(np.float64)}
        p1 = tmp_path / "a.dyst"
        p2 = tmp_path / "b.dyst"
        checkpoint.save(p1, {"x": "1"}, tensors)
        cfg, loaded = checkpoint.load(p1)
        checkpoint.save(p2, cfg, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.dyst"
        p.write_bytes(b"WXYZ" + b"\x00" * 16)
        with pytest.raises(ValueError, match="DYST"):
            checkpoint.load(p)


class TestConfig:
    def test_file_overrides_defaults_and_flags_override_file(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("world.coart_lag_q = 3  # lag\n\n# comment\nseed = 9\n")
        run = build_run_config(cfg_file, {"seed": "11"})
        assert run.world.coart_lag_q == 3
        assert run.seed == 11

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            merge_settings({"no.such.key": "1"})

    def test_bad_line_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("just words\n")
        with pytest.raises(ValueError, match="key = value"):
            parse_config_file(bad)

    def test_every_default_key_parses(self):
        run = build_run_config()
        assert run.world.motion_dim == 16
        assert run.generator.window == 40
        assert run.sampler.steps == 5
        assert run.encoder_speaker().lookahead == 2
        assert run.encoder_listener().lookahead == 0
        assert run.encoder_teacher().mode == "full"

    def test_subsystem_seeds_differ_and_are_stable(self):
        run = build_run_config(overrides={"seed": "7"})
        seeds = {tag: run.subsystem_seed(tag) for tag in ("world", "init", "train", "sample")}
        assert len(set(seeds.values())) == 4
        run2 = build_run_config(overrides={"seed": "7"})
        assert seeds == {tag: run2.subsystem_seed(tag) for tag in seeds}


class TestCliCommands:
    def test_usage_error_exits_one(self, capsys):
        assert main(["synth", "--no-such-flag"]) == 1
        assert main([]) == 1

    def test_missing_output_dir_exits_two(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "missing")] + TINY)
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_missing_dataset_exits_two(self, tmp_path, capsys):
        rc = main(
            ["train", "--dataset", str(tmp_path / "none.dysw"), "--out", str(tmp_path)]
            + TINY
        )
        assert rc == 2

    def test_synth_is_reproducible(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert main(["synth", "--seed", "7", "--out", str(a)] + TINY) == 0
        assert main(["synth", "--seed", "7", "--out", str(b)] + TINY) == 0
        assert (a / "dataset.dysw").read_bytes() == (b / "dataset.dysw").read_bytes()

    def test_full_cli_pipeline(self, tmp_path, capsys):
        out = tmp_path
        ds = str(out / "dataset.dysw")
        assert main(["synth", "--seed", "3", "--out", str(out)] + TINY) == 0

        # teacher then student distillation
        assert main(["distill", "--dataset", ds, "--pretrain", "--out", str(out)] + TINY) == 0
        assert (out / "teacher.dyst").exists()
        assert (
            main(
                ["distill", "--dataset", ds, "--teacher", str(out / "teacher.dyst"),
                 "--lookahead", "2", "--out", str(out)] + TINY
            )
            == 0
        )
        assert (out / "encoder_L2.dyst").exists()

        # missing teacher is a data error
        assert (
            main(
                ["distill", "--dataset", ds, "--teacher", str(out / "nope.dyst"),
                 "--out", str(out)] + TINY
            )
            == 2
        )

        assert (
            main(
                ["train", "--dataset", ds, "--encoder", str(out / "encoder_L2.dyst"),
                 "--out", str(out)] + TINY
            )
            == 0
        )
        ckpt = out / "generator.dyst"
        assert ckpt.exists()
        loss_lines = (out / "train_loss.csv").read_text().splitlines()
        assert loss_lines[0] == "step,loss"
        assert len(loss_lines) == 3

        gen_dir = out / "gen"
        gen_dir.mkdir()
        assert (
            main(
                ["generate", "--model", str(ckpt), "--dataset", ds,
                 "--episode", "0", "--out", str(gen_dir), "--seed", "3"] + TINY
            )
            == 0
        )
        stream_dir = out / "stream"
        stream_dir.mkdir()
        assert (
            main(
                ["stream", "--model", str(ckpt), "--dataset", ds, "--episode", "0",
                 "--packet-ms", "100", "--clock", "virtual", "--out", str(stream_dir),
                 "--seed", "3"] + TINY
            )
            == 0
        )
        offline = np.load(gen_dir / "motion_0.npy")
        streamed = np.load(stream_dir / "motion_0.npy")
        assert np.array_equal(offline, streamed)
        trace = (stream_dir / "trace.csv").read_text().splitlines()
        assert trace[0] == "frame,packet_arrival_s,emit_s,apd_s"
        summary = capsys.readouterr().out
        for key in ("fps=", "mean_apd_s=", "max_apd_s=", "rtf="):
            assert key in summary

        # eval on ground truth scores perfectly
        eval_dir = out / "eval"
        eval_dir.mkdir()
        assert (
            main(["eval", "--dataset", ds, "--episode", "0", "--out", str(eval_dir)] + TINY)
            == 0
        )
        text = capsys.readouterr().out
        assert "mse=0" in text
        report = (eval_dir / "report.csv").read_text().splitlines()
        assert report[0].startswith("episode,sync,offset,")

    def test_checkpoint_bundle_round_trip(self, tmp_path):
        out = tmp_path
        ds = str(out / "dataset.dysw")
        assert main(["synth", "--seed", "5", "--out", str(out)] + TINY) == 0
        assert main(["train", "--dataset", ds, "--out", str(out)] + TINY) == 0
        bundle = ModelBundle.load(out / "generator.dyst")
        bundle.save(out / "copy.dyst")
        assert (out / "generator.dyst").read_bytes() == (out / "copy.dyst").read_bytes()

    def test_ablate_single_lookahead_and_reproducibility(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        out_a.mkdir()
        out_b.mkdir()
        ds = str(out_a / "dataset.dysw")
        assert main(["synth", "--seed", "2", "--out", str(out_a)] + TINY) == 0
        args = ["ablate", "--dataset", ds, "--lookahead-list", "0",
                "--train-steps", "2", "--seed", "2"] + TINY
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        sweep_a = (out_a / "sweep.csv").read_text()
        sweep_b = (out_b / "sweep.csv").read_text()
        assert sweep_a == sweep_b
        lines = sweep_a.splitlines()
        assert lines[0] == "lookahead_frames,lookahead_ms,sync_proxy,mse"
        assert len(lines) == 2
        assert lines[1].startswith("0,0,")

    def test_ablate_parallel_workers_match_sequential(self, tmp_path, monkeypatch):
        out_a = tmp_path / "seq"
        out_b = tmp_path / "par"
        out_a.mkdir()
        out_b.mkdir()
        ds = str(out_a / "dataset.dysw")
        assert main(["synth", "--seed", "4", "--out", str(out_a)] + TINY) == 0
        args = ["ablate", "--dataset", ds, "--lookahead-list", "0,1",
                "--train-steps", "2", "--seed", "4"] + TINY
        monkeypatch.delenv("DYSTREAM_THREADS", raising=False)
        assert main(args + ["--out", str(out_a)]) == 0
        monkeypatch.setenv("DYSTREAM_THREADS", "2")
        assert main(args + ["--out", str(out_b)]) == 0
        assert (out_a / "sweep.csv").read_text() == (out_b / "sweep.csv").read_text()
