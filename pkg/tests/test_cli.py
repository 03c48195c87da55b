"""End-to-end tests of the command-line scripts on tiny configs."""

import pandas as pd
import pytest

import evaluate_generator
import generate_dataset
import interpolate_latents
import plot_training_log
import rebalance_stats
import sample_images
import train_imle
from experiment_config import load_config


TINY_GMM = {
    "task": "gmm",
    "num_classes": 2,
    "modes_per_condition": 2,
    "samples_per_condition": 8,
    "epochs": 2,
    "batch_size": 4,
    "samples_per_example": 3,
    "inner_steps": 2,
    "inner_batch_size": 2,
    "hidden_widths": "4,4",
    "encoder_widths": "4,4",
    "seed": 3,
}

TINY_LAYOUT = {
    "task": "layout",
    "height": 4,
    "width": 8,
    "num_classes": 3,
    "num_layouts": 2,
    "images_per_layout": 4,
    "epochs": 1,
    "batch_size": 4,
    "samples_per_example": 2,
    "inner_steps": 1,
    "inner_batch_size": 2,
    "hidden_widths": "4",
    "encoder_widths": "3,3",
    "noise_channels": 2,
    "seed_dim": 2,
}


def write_config(path, values, **overrides):
    merged = dict(values)
    merged.update(overrides)
    path.write_text("".join(f"{key} = {value}\n" for key, value in merged.items()))
    return path


@pytest.fixture
def trained_gmm(tmp_path):
    config = write_config(tmp_path / "gmm.cfg", TINY_GMM, output_dir=tmp_path / "run")
    assert train_imle.main(["--config", str(config), "--workers", "1"]) == 0
    return tmp_path / "run"


class TestTrainImle:
    """train_imle.py"""

    def test_writes_run_directory(self, trained_gmm):
        for name in ("resolved_config.txt", "training_log.csv", "timings.csv", "final.ckpt"):
            assert (trained_gmm / name).exists()
        log = pd.read_csv(trained_gmm / "training_log.csv")
        assert list(log.columns) == ["epoch", "mean_matched_distance", "mean_inner_loss"]
        assert list(log["epoch"]) == [1, 2]

    def test_outputs_are_byte_identical_across_worker_counts(self, trained_gmm, tmp_path):
        config = write_config(tmp_path / "again.cfg", TINY_GMM, output_dir=tmp_path / "again")
        assert train_imle.main(["--config", str(config), "--workers", "2"]) == 0
        first = (trained_gmm / "training_log.csv").read_bytes()
        second = (tmp_path / "again" / "training_log.csv").read_bytes()
        assert first == second
        assert (trained_gmm / "final.ckpt").read_bytes() == (tmp_path / "again" / "final.ckpt").read_bytes()

    def test_resolved_config_reproduces_run_settings(self, trained_gmm):
        resolved = load_config(trained_gmm / "resolved_config.txt")
        assert resolved.epochs == 2
        assert resolved.output_dir == str(trained_gmm)

    def test_checkpoints_every_n_epochs(self, tmp_path):
        config = write_config(tmp_path / "c.cfg", TINY_GMM, checkpoint_every=1, output_dir=tmp_path / "ck")
        assert train_imle.main(["--config", str(config), "--workers", "1"]) == 0
        assert (tmp_path / "ck" / "checkpoint_epoch0001.ckpt").exists()
        assert (tmp_path / "ck" / "checkpoint_epoch0002.ckpt").exists()

    def test_bad_config_exits_2(self, tmp_path, capsys):
        config = write_config(tmp_path / "bad.cfg", TINY_GMM, learning_rte=0.1)
        assert train_imle.main(["--config", str(config)]) == 2
        assert "line" in capsys.readouterr().err

    def test_batch_below_portions_rejected_before_any_output(self, tmp_path, capsys):
        config = write_config(tmp_path / "l.cfg", TINY_LAYOUT, batch_size=2, output_dir=tmp_path / "lay")
        assert train_imle.main(["--config", str(config), "--workers", "1"]) == 2
        assert "line" in capsys.readouterr().err
        assert not (tmp_path / "lay").exists()

    def test_missing_config_exits_2(self, tmp_path):
        assert train_imle.main(["--config", str(tmp_path / "absent.cfg")]) == 2

    def test_missing_dataset_exits_2(self, tmp_path):
        config = write_config(tmp_path / "c.cfg", TINY_GMM, dataset=tmp_path / "nowhere",
                              output_dir=tmp_path / "out")
        assert train_imle.main(["--config", str(config)]) == 2

    def test_divergence_exits_3_and_saves_state(self, tmp_path):
        config = write_config(tmp_path / "c.cfg", TINY_GMM, epochs=5, inner_steps=20,
                              learning_rate=1e12, output_dir=tmp_path / "div")
        assert train_imle.main(["--config", str(config), "--workers", "1"]) == 3
        assert (tmp_path / "div" / "diverged.ckpt").exists()

    def test_layout_run_with_rebalancing(self, tmp_path):
        config = write_config(tmp_path / "l.cfg", TINY_LAYOUT, output_dir=tmp_path / "lay")
        assert train_imle.main(["--config", str(config), "--workers", "1"]) == 0
        assert (tmp_path / "lay" / "final.ckpt").exists()


class TestSampleAndInterpolate:
    """sample_images.py and interpolate_latents.py"""

    def test_samples_and_mosaic(self, trained_gmm, tmp_path):
        out = tmp_path / "samples"
        args = ["--checkpoint", str(trained_gmm / "final.ckpt"), "--condition", "1",
                "--samples", "4", "--seed", "7", "--out", str(out)]
        assert sample_images.main(args) == 0
        assert sorted(p.name for p in out.iterdir()) == [
            "mosaic.ppm", "sample_000.ppm", "sample_001.ppm", "sample_002.ppm", "sample_003.ppm",
        ]

    def test_same_seed_same_files(self, trained_gmm, tmp_path):
        for name in ("a", "b"):
            sample_images.main(["--checkpoint", str(trained_gmm / "final.ckpt"), "--condition", "0",
                                "--samples", "2", "--seed", "5", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "sample_001.ppm").read_bytes() == (tmp_path / "b" / "sample_001.ppm").read_bytes()

    def test_zero_samples_writes_nothing(self, trained_gmm, tmp_path):
        out = tmp_path / "none"
        args = ["--checkpoint", str(trained_gmm / "final.ckpt"), "--condition", "0",
                "--samples", "0", "--out", str(out)]
        assert sample_images.main(args) == 0
        assert not out.exists()

    def test_negative_samples_exit_2(self, trained_gmm):
        args = ["--checkpoint", str(trained_gmm / "final.ckpt"), "--condition", "0", "--samples", "-1"]
        assert sample_images.main(args) == 2

    def test_corrupt_checkpoint_exits_4(self, trained_gmm, tmp_path):
        blob = bytearray((trained_gmm / "final.ckpt").read_bytes())
        blob[40] ^= 0x01
        broken = tmp_path / "broken.ckpt"
        broken.write_bytes(bytes(blob))
        args = ["--checkpoint", str(broken), "--condition", "0", "--out", str(tmp_path / "s")]
        assert sample_images.main(args) == 4

    def test_first_frame_matches_first_sample(self, trained_gmm, tmp_path):
        checkpoint = str(trained_gmm / "final.ckpt")
        sample_images.main(["--checkpoint", checkpoint, "--condition", "1", "--samples", "1",
                            "--seed", "11", "--out", str(tmp_path / "s")])
        assert interpolate_latents.main(["--checkpoint", checkpoint, "--condition", "1",
                                         "--seed-a", "11", "--seed-b", "12", "--steps", "5",
                                         "--out", str(tmp_path / "i")]) == 0
        assert (tmp_path / "i" / "frame_000.ppm").read_bytes() == (tmp_path / "s" / "sample_000.ppm").read_bytes()
        assert (tmp_path / "i" / "frame_004.ppm").exists()
        assert (tmp_path / "i" / "strip.ppm").exists()

    def test_single_step_rejected(self, trained_gmm, tmp_path):
        args = ["--checkpoint", str(trained_gmm / "final.ckpt"), "--condition", "0",
                "--seed-a", "1", "--seed-b", "2", "--steps", "1", "--out", str(tmp_path / "i")]
        assert interpolate_latents.main(args) == 2


class TestDatasetTools:
    """generate_dataset.py, rebalance_stats.py and evaluate_generator.py"""

    def test_generate_and_evaluate_gmm(self, trained_gmm, tmp_path):
        config = write_config(tmp_path / "gmm.cfg", TINY_GMM)
        data = tmp_path / "data"
        assert generate_dataset.main(["--config", str(config), "--out", str(data)]) == 0
        assert (data / "example_layout.ciml").exists()
        out = tmp_path / "eval"
        args = ["--checkpoint", str(trained_gmm / "final.ckpt"), "--dataset", str(data),
                "--pairs", "3", "--inputs", "2", "--samples", "10", "--out", str(out)]
        assert evaluate_generator.main(args) == 0
        coverage = pd.read_csv(out / "coverage.csv")
        assert list(coverage["condition"].astype(str)) == ["0", "1", "MEAN"]
        assert coverage["coverage"].between(0, 1).all()
        diversity = pd.read_csv(out / "diversity.csv")
        assert diversity["input_index"].astype(str).iloc[-1] == "MEAN"

    def test_rebalance_stats(self, tmp_path):
        config = write_config(tmp_path / "l.cfg", TINY_LAYOUT)
        data = tmp_path / "layout"
        assert generate_dataset.main(["--config", str(config), "--out", str(data)]) == 0
        output = tmp_path / "rarity.csv"
        assert rebalance_stats.main(["--dataset", str(data), "--output", str(output),
                                     "--batch-size", "4"]) == 0
        frame = pd.read_csv(output)
        assert list(frame.columns) == [
            "category", "image_index", "avg_r", "avg_g", "avg_b", "density", "rarity",
        ]
        assert (frame["rarity"] > 0).all()

    def test_missing_dataset_exit_2(self, tmp_path):
        assert rebalance_stats.main(["--dataset", str(tmp_path / "nowhere")]) == 2

    def test_plot_training_log(self, trained_gmm, tmp_path):
        output = tmp_path / "curves.png"
        assert plot_training_log.main(["--input", str(trained_gmm), "--output", str(output)]) == 0
        assert output.stat().st_size > 0
