from pathlib import Path
from typing import Dict, List, Optional, Union

import pytorch_lightning as L
import torch
from loguru import logger
from omegaconf import DictConfig

from depthdiff.biasmap import BiasMapGate, biasmap_weights
from depthdiff.checkpoint import load_config, load_tensors, save_tensors
from depthdiff.codec import IMAGE_CHANNELS, encode, encode_depth, latent_channels
from depthdiff.config import restore_config, to_container, validate
from depthdiff.errors import NonFiniteLossError, ParameterError
from depthdiff.loss import total_loss
from depthdiff.model import NONE, DepthUNet, predict_noise
from depthdiff.normalize import DepthMap
from depthdiff.ops import max_pool2d
from depthdiff.schedule import build_schedule, ensemble_infer, ensemble_seeds, forward_noise
from depthdiff.utils import generator_for, source_revision, stream_seed

OPTIMIZER_PREFIX = "optim."
ADAM_STATE = ("exp_avg", "exp_avg_sq", "step")


def build_denoiser(config) -> DepthUNet:
    """U-Net for the configured latent geometry. Initial weights come from the
    run seed's "init" stream, independent of any other RNG use."""
    r = config.train.latent_factor
    size = config.scene.image_size
    if size % r:
        raise ParameterError(f"image size {size} is not divisible by the latent factor {r}")
    unet = config.unet
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_seed(config.seed, "init"))
        return DepthUNet(
            latent_channels=latent_channels(r, IMAGE_CHANNELS),
            latent_size=size // r,
            base_channels=unet.base_channels,
            depth=unet.depth,
            time_dim=unet.time_dim,
            lfm_placement=unet.lfm_placement if config.train.lfm_on else NONE,
            router_variant=unet.router_variant,
            n_masks=unet.n_masks,
            lfm_learnable_masks=unet.lfm_learnable_masks,
        )


class DepthDiffusionLightning(L.LightningModule):
    """Training and inference layer around the denoiser: noising, the
    depth-aware loss weights, the optimizer and checkpoint state."""

    def __init__(self, config: Union[dict, DictConfig]):
        super().__init__()
        # Plain dicts come from checkpoints
        self.config = restore_config(config)
        cfg = self.config
        validate(cfg)

        self.model = build_denoiser(cfg)
        self.gate = BiasMapGate(cfg.train.kappa)
        self.schedule = build_schedule(
            cfg.schedule.num_train_timesteps,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
            cfg.schedule.kind,
        )
        self.r = cfg.train.latent_factor
        self.start_step = 0
        self._pending_optimizer_state: Optional[Dict[str, torch.Tensor]] = None

    def draw_noise(self, step: int, z0: torch.Tensor):
        """Timesteps (b,) and standard normal noise for one training step."""
        B = z0.shape[0]
        t = torch.randint(
            1,
            self.schedule.T + 1,
            (B,),
            generator=generator_for(self.config.seed, "timesteps", step),
        )
        eps = torch.randn(
            z0.shape,
            generator=generator_for(self.config.seed, "noise", step),
            dtype=z0.dtype,
        )
        return t, eps

    def loss_weights(self, d_norm, valid, t):
        """Per-latent-pixel weights (b, h, w) and the ramp factor per sample."""
        train = self.config.train
        if train.biasmap_on:
            w_final, eta = biasmap_weights(
                d_norm,
                valid,
                t,
                self.gate,
                self.schedule,
                self.r,
                gamma=train.gamma,
                use_dist=train.w_dist_on,
                use_struct=train.w_struct_on,
                dist_pool=train.dist_pool,
                struct_pool=train.struct_pool,
            )
        else:
            B, H, W = d_norm.shape
            w_final = torch.ones(B, H // self.r, W // self.r, dtype=d_norm.dtype)
            eta = torch.zeros(B, dtype=torch.float64)
        return w_final * self.latent_validity(valid).to(w_final.dtype), eta

    def latent_validity(self, valid: torch.Tensor) -> torch.Tensor:
        """(b, h, w) bool: a latent pixel counts if any pixel of its r x r block is valid."""
        return max_pool2d(valid.float().unsqueeze(1), self.r).squeeze(1) > 0

    def step(self, batch, step: Optional[int] = None, t: Optional[torch.Tensor] = None):
        """Loss for one batch. `t` pins the timesteps instead of drawing them."""
        image = batch["image"].to(self.dtype)
        d_norm = batch["depth"].to(self.dtype)
        valid = batch["valid"].bool()
        if step is None:
            step = int(batch["step"])
        B = image.shape[0]

        z_x = encode(image, self.r)
        z0 = encode_depth(d_norm, self.r)
        t_drawn, eps = self.draw_noise(step, z0)
        t = t_drawn if t is None else t.long()
        z_t = forward_noise(z0, t, eps, self.schedule)
        eps_hat = predict_noise(z_t, z_x, t, self.model)
        assert eps_hat.shape == z0.shape

        w_final, eta = self.loss_weights(d_norm, valid, t)
        assert w_final.shape == (B, *z0.shape[-2:])
        lam = self.config.train.lam if self.config.train.var_loss_on else 0.0
        latent_valid = self.latent_validity(valid)
        report = total_loss(eps_hat, eps, w_final, lam, valid=latent_valid)

        if not torch.isfinite(report.total):
            diagnostics = {"step": step, "t": t.tolist(), **report.as_dict()}
            logger.error("non-finite loss at step {}: {}", step, diagnostics)
            raise NonFiniteLossError(f"non-finite loss at step {step}", diagnostics)
        w_valid = w_final.detach()[latent_valid]
        stats = {
            "mean_eta": float(eta.mean()),
            "w_mean": float(w_final.mean().detach()),
            "w_dev": float((w_valid - 1).abs().mean()) if w_valid.numel() else 0.0,
        }
        return report, stats

    def training_step(self, batch, batch_idx):
        report, stats = self.step(batch)
        return {"loss": report.total, "report": report.as_dict(), **stats}

    def parameter_groups(self):
        """AdamW groups: weight decay on the denoiser, none on the gate bias."""
        return [
            {
                "params": [p for _, p in self.model.named_parameters()],
                "weight_decay": self.config.train.weight_decay,
            },
            {"params": [p for _, p in self.gate.named_parameters()], "weight_decay": 0.0},
        ]

    def parameter_names(self) -> List[str]:
        """Names in optimizer order, matching `parameter_groups`."""
        return [f"model.{n}" for n, _ in self.model.named_parameters()] + [
            f"gate.{n}" for n, _ in self.gate.named_parameters()
        ]

    def configure_optimizers(self):
        train = self.config.train
        return torch.optim.AdamW(
            self.parameter_groups(),
            lr=train.lr,
            betas=(train.adam_beta1, train.adam_beta2),
        )

    def on_train_start(self):
        if self._pending_optimizer_state is not None:
            optimizer = self.trainer.optimizers[0]
            optimizer.load_state_dict(
                self.optimizer_state_dict(self._pending_optimizer_state, optimizer)
            )
            self._pending_optimizer_state = None
            logger.info("restored optimizer state at step {}", self.start_step)

    def optimizer_tensors(self, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
        """Flatten Adam moments and step counts into named tensors."""
        params = [p for group in optimizer.param_groups for p in group["params"]]
        tensors = {}
        for name, param in zip(self.parameter_names(), params):
            state = optimizer.state.get(param)
            if not state:
                continue
            for key in ADAM_STATE:
                value = state[key]
                key_name = f"{OPTIMIZER_PREFIX}{name}.{key}"
                tensors[key_name] = torch.as_tensor(value, dtype=torch.float32)
        return tensors

    def optimizer_state_dict(
        self, tensors: Dict[str, torch.Tensor], optimizer: torch.optim.Optimizer
    ):
        state = {}
        for i, name in enumerate(self.parameter_names()):
            prefix = f"{OPTIMIZER_PREFIX}{name}."
            if f"{prefix}step" in tensors:
                state[i] = {key: tensors[prefix + key].clone() for key in ADAM_STATE}
        return {"state": state, "param_groups": optimizer.state_dict()["param_groups"]}

    def save_checkpoint(
        self,
        path: Union[str, Path],
        step: int,
        optimizer: Optional[torch.optim.Optimizer] = None,
    ):
        tensors = {k: v for k, v in self.state_dict().items()}
        if optimizer is not None:
            tensors.update(self.optimizer_tensors(optimizer))
        revision = source_revision()
        meta = {"step": str(step), "revision": revision["commit"] if revision else "unknown"}
        save_tensors(path, tensors, meta, to_container(self.config))

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "DepthDiffusionLightning":
        module = cls(load_config(path))
        tensors, meta = load_tensors(path)
        weights = {k: v for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX)}
        module.load_state_dict(weights)
        optim = {k: v for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIX)}
        module._pending_optimizer_state = optim or None
        module.start_step = int(meta.get("step", 0))
        logger.info("loaded checkpoint {} at step {}", path, module.start_step)
        return module

    def forward(self, z_t, z_x, t):
        return predict_noise(z_t, z_x, t, self.model)

    @torch.no_grad()
    def predict_depth(
        self, image: torch.Tensor, runs: Optional[int] = None, seed: int = 0
    ) -> DepthMap:
        """Normalized depth for one (3, H, W) image, averaged over `runs`
        seeded DDIM trajectories."""
        if runs is None:
            runs = self.config.schedule.ensemble_runs
        z_x = encode(image.to(self.dtype), self.r)
        return ensemble_infer(
            self.forward,
            z_x,
            runs,
            ensemble_seeds(seed, runs),
            self.schedule,
            self.config.schedule.num_inference_steps,
            self.r,
        )

    def lfm_parameter_count(self) -> int:
        return self.model.lfm_parameter_count()
