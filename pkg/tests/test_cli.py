import csv

import pytest
from omegaconf import OmegaConf

from depthdiff.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, INVOCATION, RESOLVED_CONFIG, main
from depthdiff.fileio import MANIFEST_NAME, read_manifest

TINY = ["unet=tiny", "scene.image_size=16", "schedule.num_train_timesteps=50", "schedule.num_inference_steps=4"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--count", "4", "--out", str(out), *TINY]) == EXIT_OK
    return out


@pytest.fixture
def checkpoint(tmp_path, dataset):
    out = tmp_path / "run"
    argv = ["train", "--data", str(dataset), "--steps", "6", "--out", str(out), *TINY, "train.batch_size=2"]
    assert main(argv) == EXIT_OK
    return out / "checkpoints" / "last"


class TestGen:
    def test_writes_dataset_and_run_record(self, dataset):
        assert len(read_manifest(dataset / MANIFEST_NAME)) == 4
        assert len(list(dataset.glob("*_depth.pfm"))) == 4
        cfg = OmegaConf.load(dataset / RESOLVED_CONFIG)
        assert cfg.scene.image_size == 16
        assert OmegaConf.load(dataset / INVOCATION).command == "gen"

    def test_scene_spec_file(self, tmp_path):
        spec = tmp_path / "scene.yaml"
        spec.write_text("image_size: 8\ntail_exponent: 3.0\n")
        out = tmp_path / "data"
        assert main(["gen", "--count", "2", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
        cfg = OmegaConf.load(out / RESOLVED_CONFIG)
        assert cfg.scene.image_size == 8 and cfg.scene.tail_exponent == 3.0

    def test_pgm_images(self, tmp_path):
        out = tmp_path / "data"
        assert main(["gen", "--count", "1", "--image-format", "pgm", "--out", str(out), *TINY]) == EXIT_OK
        assert len(list(out.glob("*_image_*.pgm"))) == 3


class TestPipeline:
    def test_train_outputs(self, checkpoint):
        run = checkpoint.parent.parent
        assert (run / "train_log.csv").exists()
        assert (run / "train.log").exists()
        assert OmegaConf.load(run / RESOLVED_CONFIG).train.steps == 6

    def test_infer_then_eval(self, tmp_path, dataset, checkpoint):
        pred = tmp_path / "pred"
        argv = ["infer", "--checkpoint", str(checkpoint), "--image", str(dataset), "--runs", "2", "--seed", "7", "--out", str(pred)]
        assert main(argv) == EXIT_OK
        assert len(list(pred.glob("*_depth.pfm"))) == 4
        assert len(list(pred.glob("*_preview.pgm"))) == 4

        metrics = tmp_path / "metrics.csv"
        assert main(["eval", "--pred-dir", str(pred), "--gt-dir", str(dataset), "--out", str(metrics)]) == EXIT_OK
        with metrics.open(newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 5
        assert rows[-1]["image"] == "ALL"
        assert (tmp_path / f"metrics_{RESOLVED_CONFIG}").exists()

    def test_infer_is_reproducible(self, tmp_path, dataset, checkpoint):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            image = dataset / "00000_image.pfm"
            argv = ["infer", "--checkpoint", str(checkpoint), "--image", str(image), "--seed", "3", "--out", str(out)]
            assert main(argv) == EXIT_OK
            outputs.append((out / "00000_depth.pfm").read_bytes())
        assert outputs[0] == outputs[1]

    def test_eval_of_ground_truth_against_itself(self, tmp_path, dataset):
        metrics = tmp_path / "self.csv"
        assert main(["eval", "--pred-dir", str(dataset), "--gt-dir", str(dataset), "--out", str(metrics)]) == EXIT_OK
        with metrics.open(newline="") as f:
            total = list(csv.DictReader(f))[-1]
        assert float(total["absrel"]) == pytest.approx(0.0, abs=1e-5)
        assert float(total["delta1"]) == 1.0


class TestExitCodes:
    def test_missing_input(self, tmp_path):
        argv = ["infer", "--checkpoint", str(tmp_path / "nope"), "--image", str(tmp_path), "--out", str(tmp_path / "o")]
        assert main(argv) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "train.nope=1"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--config", str(tmp_path / "none.yaml")]) == EXIT_USAGE

    def test_invalid_value(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "train.batch_size=0"]) == EXIT_USAGE

    def test_unknown_suite(self, tmp_path):
        assert main(["ablate", "--suite", "bogus", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_seed_list(self, tmp_path):
        assert main(["ablate", "--suite", "gamma", "--seeds", "1,x", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_runtime_failure(self, tmp_path, dataset):
        broken = tmp_path / "broken"
        broken.mkdir()
        argv = ["infer", "--checkpoint", str(broken), "--image", str(dataset), "--out", str(tmp_path / "o")]
        assert main(argv) == EXIT_FAILURE
