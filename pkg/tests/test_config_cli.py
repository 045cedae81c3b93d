"""Config parsing/digests and the CLI surface on a miniature pipeline."""

import numpy as np
import pytest

from efadiff.cli import main
from efadiff.config import ExperimentConfig
from efadiff.errors import ValidationError
from efadiff.imageio import read_ppm
from efadiff.serialize import load_checkpoint

MINI_CONFIG = """
# miniature end-to-end settings for CLI tests
model.channels = 4,6,8
model.embed_dim = 8
model.time_dim = 8
model.d8 = 4
model.d16 = 4
dataset.per_attribute = 4
dataset.pretrain_per_attribute = 4
pretrain.steps = 3
pretrain.batch_size = 4
efa_train.steps = 4
efa_train.batch_size = 2
sample.steps = 5
eval.prompts = subject stripes background,subject checker background
eval.n_per_prompt = 3
eval.steps = 4
eval.batch = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "mini.cfg"
    p.write_text(MINI_CONFIG)
    return str(p)


class TestConfig:
    def test_defaults_and_overrides(self, cfg_path):
        cfg = ExperimentConfig.load(cfg_path)
        assert cfg["model.channels"] == (4, 6, 8)
        assert cfg["pretrain.steps"] == 3
        assert cfg["schedule.T"] == 200  # untouched default
        assert cfg["eval.prompts"] == ("subject stripes background", "subject checker background")

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("nosuch.key = 1\n")
        with pytest.raises(ValidationError):
            ExperimentConfig.load(p)

    def test_digest_tracks_values(self, cfg_path):
        a = ExperimentConfig.load(cfg_path)
        b = ExperimentConfig.load(cfg_path)
        assert a.digest() == b.digest()
        c = ExperimentConfig({"pretrain.steps": 4})
        assert a.digest() != c.digest()

    def test_bias_and_product(self):
        cfg = ExperimentConfig({})
        assert cfg.bias().attributes == ("red", "blue")
        cfg2 = ExperimentConfig(
            {"bias2.name": "tone", "bias2.attributes": ("bright", "dark")}
        )
        assert cfg2.bias().n_attributes == 4
        assert cfg2.bias().attributes[0] == ("red", "bright")

    def test_bool_parsing(self, tmp_path):
        p = tmp_path / "b.cfg"
        p.write_text("ablate.no_seg_mask = true\n")
        assert ExperimentConfig.load(p)["ablate.no_seg_mask"] is True
        p.write_text("ablate.no_seg_mask = maybe\n")
        with pytest.raises(ValidationError):
            ExperimentConfig.load(p)


class TestCliPipeline:
    def test_full_mini_pipeline(self, tmp_path, cfg_path, capsys):
        data = tmp_path / "data"
        base = tmp_path / "base.ckpt"
        adapter = tmp_path / "efa.ckpt"

        assert main(["gen-dataset", "--config", cfg_path, "--out", str(data)]) == 0
        assert (data / "pretrain" / "manifest.csv").exists()
        assert (data / "efa" / "manifest.csv").exists()

        # rerun without --force must fail with the validation exit code
        assert main(["gen-dataset", "--config", cfg_path, "--out", str(data)]) == 2
        assert main(["gen-dataset", "--config", cfg_path, "--out", str(data), "--force"]) == 0

        assert main(["pretrain", "--config", cfg_path, "--data", str(data), "--out", str(base)]) == 0
        _, meta = load_checkpoint(base)
        assert "arch_hash" in meta and "config_digest" in meta

        assert main([
            "train-efa", "--config", cfg_path, "--base", str(base),
            "--data", str(data), "--out", str(adapter),
        ]) == 0
        assert (tmp_path / "efa.ckpt.loss.csv").exists()
        assert (tmp_path / "efa.ckpt.state").exists()

        out = tmp_path / "samples"
        assert main([
            "sample", "--config", cfg_path, "--base", str(base), "--adapter", str(adapter),
            "--prompt", "subject stripes background", "--seeds", "5,6",
            "--paired", "--attribute", "red", "--dump-attn", "--out", str(out),
        ]) == 0
        img = read_ppm(out / "sample_s5_efa.ppm")
        assert img.shape == (3, 32, 32)
        assert (out / "sample_s5_base.ppm").exists()
        assert any((out / "attn_s5").glob("*.pgm"))
        records = (out / "records.txt").read_text()
        assert "attribute = red" in records

        report_dir = tmp_path / "report"
        assert main([
            "eval", "--config", cfg_path, "--base", str(base), "--adapter", str(adapter),
            "--out", str(report_dir),
        ]) == 0
        text = (report_dir / "report.txt").read_text()
        assert "config_digest" in text and "deviation_ratio" in text
        csv_lines = (report_dir / "per_prompt.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 1 + 2  # header + one row per prompt

    def test_pretrain_steps_zero_saves_random_init(self, tmp_path, cfg_path):
        data = tmp_path / "data"
        base = tmp_path / "base0.ckpt"
        assert main(["gen-dataset", "--config", cfg_path, "--out", str(data)]) == 0
        assert main([
            "pretrain", "--config", cfg_path, "--data", str(data),
            "--out", str(base), "--steps", "0",
        ]) == 0
        assert base.exists()

    def test_dataset_digest_reproducible(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen-dataset", "--config", cfg_path, "--out", str(a)])
        main(["gen-dataset", "--config", cfg_path, "--out", str(b)])
        assert (a / "pretrain" / "manifest.csv").read_bytes() == (b / "pretrain" / "manifest.csv").read_bytes()

    def test_commands_are_bit_deterministic(self, tmp_path, cfg_path):
        data = tmp_path / "data"
        main(["gen-dataset", "--config", cfg_path, "--out", str(data)])
        outs = []
        for name in ("x.ckpt", "y.ckpt"):
            path = tmp_path / name
            main(["pretrain", "--config", cfg_path, "--data", str(data), "--out", str(path)])
            raw = path.read_bytes()
            outs.append(raw)
        assert outs[0] == outs[1]

    def test_adapter_refuses_wrong_base(self, tmp_path, cfg_path):
        data = tmp_path / "data"
        main(["gen-dataset", "--config", cfg_path, "--out", str(data)])
        base1, base2 = tmp_path / "b1.ckpt", tmp_path / "b2.ckpt"
        main(["pretrain", "--config", cfg_path, "--data", str(data), "--out", str(base1), "--steps", "1"])
        other_cfg = tmp_path / "other.cfg"
        other_cfg.write_text(MINI_CONFIG.replace("model.channels = 4,6,8", "model.channels = 4,6,10"))
        main(["pretrain", "--config", str(other_cfg), "--data", str(data), "--out", str(base2), "--steps", "1"])
        adapter = tmp_path / "a.ckpt"
        assert main([
            "train-efa", "--config", cfg_path, "--base", str(base1),
            "--data", str(data), "--out", str(adapter),
        ]) == 0
        out = tmp_path / "s"
        code = main([
            "sample", "--config", str(other_cfg), "--base", str(base2), "--adapter", str(adapter),
            "--prompt", "subject stripes background", "--seeds", "1", "--out", str(out),
        ])
        assert code == 2

    def test_resume_matches_uninterrupted(self, tmp_path, cfg_path):
        data = tmp_path / "data"
        main(["gen-dataset", "--config", cfg_path, "--out", str(data)])
        base = tmp_path / "base.ckpt"
        main(["pretrain", "--config", cfg_path, "--data", str(data), "--out", str(base), "--steps", "1"])
        full = tmp_path / "full.ckpt"
        main([
            "train-efa", "--config", cfg_path, "--base", str(base), "--data", str(data),
            "--out", str(full), "--steps", "6",
        ])
        part = tmp_path / "part.ckpt"
        main([
            "train-efa", "--config", cfg_path, "--base", str(base), "--data", str(data),
            "--out", str(part), "--steps", "3",
        ])
        resumed = tmp_path / "resumed.ckpt"
        main([
            "train-efa", "--config", cfg_path, "--base", str(base), "--data", str(data),
            "--out", str(resumed), "--steps", "6", "--resume", str(part) + ".state",
        ])
        full_tensors, _ = load_checkpoint(full)
        res_tensors, _ = load_checkpoint(resumed)
        assert set(full_tensors) == set(res_tensors)
        for k in full_tensors:
            assert full_tensors[k].tobytes() == res_tensors[k].tobytes(), k

    def test_eval_gate_exit_code(self, tmp_path, cfg_path):
        gate_cfg = tmp_path / "gate.cfg"
        gate_cfg.write_text(MINI_CONFIG + "\neval.min_psnr = 100.0\n")  # above the 99 dB cap
        data = tmp_path / "data"
        main(["gen-dataset", "--config", cfg_path, "--out", str(data)])
        base = tmp_path / "base.ckpt"
        main(["pretrain", "--config", cfg_path, "--data", str(data), "--out", str(base)])
        adapter = tmp_path / "efa.ckpt"
        main([
            "train-efa", "--config", cfg_path, "--base", str(base), "--data", str(data),
            "--out", str(adapter),
        ])
        code = main([
            "eval", "--config", str(gate_cfg), "--base", str(base), "--adapter", str(adapter),
            "--out", str(tmp_path / "r"),
        ])
        assert code == 4
