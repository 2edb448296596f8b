import pytest
from omegaconf import OmegaConf
from omegaconf.errors import ConfigKeyError, OmegaConfBaseException

from depthdiff.config import load_config, restore_config, to_container, validate
from depthdiff.data import scene_spec
from depthdiff.errors import ParameterError
from depthdiff.utils import stream_seed


class TestLoadConfig:
    def test_packaged_defaults(self):
        cfg = load_config()
        assert cfg.schedule.num_train_timesteps == 200
        assert cfg.schedule.num_inference_steps == 20
        assert cfg.schedule.ensemble_runs == 4
        assert cfg.train.lr == pytest.approx(3e-5)
        assert cfg.train.latent_factor == 4
        assert cfg.train.gamma == 5.0
        assert cfg.unet.lfm_placement == "decoder-penultimate"
        assert cfg.unet.router_variant == "LE+SA+PM"
        assert cfg.scene.tail_exponent == 2.0

    def test_group_selection(self):
        assert load_config(overrides=["unet=tiny"]).unet.base_channels == 8
        assert load_config(overrides=["scene=uniform"]).scene.tail_exponent == 1.0

    def test_file_overrides_defaults_and_cli_overrides_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  steps: 7\n  lr: 0.001\n")
        cfg = load_config(str(path), overrides=["train.steps=9"])
        assert cfg.train.steps == 9
        assert cfg.train.lr == 0.001

    def test_layers_sit_between_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("scene:\n  d_max: 30.0\n")
        cfg = load_config(str(path), overrides=["scene.d_min=2.0"], layers=[{"scene": {"d_max": 40.0, "d_min": 0.5}}])
        assert cfg.scene.d_max == 40.0
        assert cfg.scene.d_min == 2.0

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  stepz: 7\n")
        with pytest.raises(ConfigKeyError):
            load_config(str(path))

    def test_unknown_override(self):
        with pytest.raises(OmegaConfBaseException):
            load_config(overrides=["train.nope=1"])

    def test_type_mismatch(self):
        with pytest.raises(OmegaConfBaseException):
            load_config(overrides=["train.steps=many"])


class TestValidate:
    @pytest.mark.parametrize(
        "override",
        [
            "train.steps=0",
            "train.batch_size=0",
            "train.lr=-1",
            "train.lam=-0.5",
            "train.dist_pool=median",
            "schedule.ensemble_runs=0",
            "train.latent_factor=0",
        ],
    )
    def test_rejects(self, override):
        with pytest.raises(ParameterError):
            validate(load_config(overrides=[override]))

    def test_defaults_pass(self):
        validate(load_config())


class TestRestore:
    def test_round_trip_through_plain_dict(self, tiny_config):
        restored = restore_config(to_container(tiny_config))
        assert to_container(restored) == to_container(tiny_config)

    def test_rejects_unknown_keys(self, tiny_config):
        data = to_container(tiny_config)
        data["train"]["bogus"] = 1
        with pytest.raises(OmegaConfBaseException):
            restore_config(data)


class TestSceneSpec:
    def test_seed_derived_from_run_seed(self, tiny_config):
        assert scene_spec(tiny_config).seed == stream_seed(tiny_config.seed, "data")
        assert scene_spec(tiny_config, seed=5).seed == stream_seed(5, "data")

    def test_explicit_scene_seed_wins(self):
        cfg = load_config(overrides=["scene.seed=123"])
        assert scene_spec(cfg, seed=5).seed == 123


def test_resolved_config_serializes():
    assert OmegaConf.to_yaml(load_config()).startswith("seed: 0")
