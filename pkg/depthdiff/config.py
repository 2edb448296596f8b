from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from hydra import compose, initialize_config_dir
from hydra.core.config_store import ConfigStore
from omegaconf import DictConfig, OmegaConf

from depthdiff.errors import ParameterError

CONF_DIR = Path(__file__).parent / "conf"
CONFIG_GROUPS = ("unet", "scene")


@dataclass
class ScheduleConfig:
    num_train_timesteps: int
    beta_start: float
    beta_end: float
    kind: str
    num_inference_steps: int
    ensemble_runs: int


@dataclass
class UNetConfig:
    base_channels: int
    depth: int
    time_dim: int
    lfm_placement: str
    router_variant: str
    n_masks: int
    lfm_learnable_masks: bool


@dataclass
class SceneConfig:
    image_size: int
    min_primitives: int
    max_primitives: int
    min_extent: float
    max_extent: float
    d_min: float
    d_max: float
    tail_exponent: float
    max_tilt: float
    texture_scale: float
    seed: Optional[int] = None  # None derives the data seed from the run seed


@dataclass
class TrainConfig:
    steps: int
    batch_size: int
    lr: float
    adam_beta1: float
    adam_beta2: float
    weight_decay: float
    grad_clip: float

    # component toggles
    lfm_on: bool
    biasmap_on: bool
    w_dist_on: bool
    w_struct_on: bool
    var_loss_on: bool

    # loss weighting
    lam: float
    gamma: float
    kappa: float
    dist_pool: str
    struct_pool: str

    latent_factor: int
    n_samples: int  # scenes generated when no dataset directory is given
    log_every: int
    checkpoint_every: int


@dataclass
class EvalConfig:
    n_samples: int


@dataclass
class Config:
    seed: int
    require_clean_repo: bool
    schedule: ScheduleConfig
    train: TrainConfig
    eval: EvalConfig
    unet: UNetConfig  # filled by the unet/ group
    scene: SceneConfig  # filled by the scene/ group

cs = ConfigStore.instance()
cs.store(name="base_config", node=Config)


def _split_overrides(overrides: Sequence[str]):
    """Group selections (`unet=tiny`) go to Hydra, value overrides
    (`train.steps=10`) are applied after the user's config file."""
    groups, values = [], []
    for override in overrides:
        key = override.split("=", 1)[0].lstrip("+~")
        (groups if key in CONFIG_GROUPS else values).append(override)
    return groups, values


def load_config(
    config_path: Optional[str] = None,
    overrides: Sequence[str] = (),
    layers: Sequence[dict] = (),
) -> DictConfig:
    """Resolve the run configuration.

    Precedence, lowest first: packaged defaults (conf/config.yaml and its
    groups), the YAML file at `config_path`, extra `layers` (e.g. a scene
    file given on the command line), then `key=value` overrides. Unknown keys
    are rejected at every layer."""
    groups, values = _split_overrides(overrides)
    with initialize_config_dir(config_dir=str(CONF_DIR), version_base="1.2"):
        cfg = compose(config_name="config", overrides=groups)
    OmegaConf.set_struct(cfg, True)
    if config_path is not None:
        cfg = OmegaConf.merge(cfg, OmegaConf.load(config_path))
    for layer in layers:
        cfg = OmegaConf.merge(cfg, layer)
    if values:
        cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(values))
    OmegaConf.set_struct(cfg, True)
    OmegaConf.resolve(cfg)
    return cfg


def to_container(cfg: DictConfig) -> dict:
    return OmegaConf.to_container(cfg, resolve=True)


def restore_config(node) -> DictConfig:
    """Rebuild a typed config from a plain dict (e.g. one stored with a
    checkpoint), rejecting keys the schema does not know."""
    if isinstance(node, DictConfig):
        node = OmegaConf.to_container(node, resolve=True)
    schema = OmegaConf.structured(Config)
    cfg = OmegaConf.merge(schema, node)
    OmegaConf.set_struct(cfg, True)
    return cfg


def validate(cfg) -> None:
    """Range checks the schema's types cannot express."""
    train = cfg.train
    if train.steps < 1 or train.batch_size < 1:
        raise ParameterError(
            f"steps and batch size must be positive, got {train.steps} and {train.batch_size}"
        )
    if train.lr < 0 or train.weight_decay < 0 or train.lam < 0:
        raise ParameterError("learning rate, weight decay and variance weight must be non-negative")
    if train.latent_factor < 1 or train.n_samples < 1:
        raise ParameterError("latent factor and sample count must be positive")
    for name in ("dist_pool", "struct_pool"):
        if train[name] not in ("avg", "max"):
            raise ParameterError(f"train.{name} must be avg or max, got {train[name]!r}")
    schedule = cfg.schedule
    if schedule.num_inference_steps < 1 or schedule.ensemble_runs < 1:
        raise ParameterError("inference steps and ensemble runs must be positive")
