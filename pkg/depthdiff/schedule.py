"""Diffusion coefficient tables, forward noising and deterministic DDIM sampling.

Timesteps are 1-based: t = 1 is the least noisy step, t = T the noisiest, and
t = 0 denotes the clean signal (alpha_bar_0 = 1)."""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import torch
from loguru import logger

from depthdiff.codec import decode_depth
from depthdiff.errors import ParameterError
from depthdiff.normalize import DepthMap
from depthdiff.utils import generator_for, stream_seed

Timestep = Union[int, torch.Tensor]

SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables in 64-bit. Index i holds timestep t = i + 1."""

    betas: torch.Tensor
    alphas_cumprod: torch.Tensor
    snr: torch.Tensor

    @classmethod
    def from_betas(cls, betas: torch.Tensor) -> "NoiseSchedule":
        betas = betas.to(torch.float64)
        if betas.dim() != 1 or betas.numel() < 1:
            raise ParameterError("betas must be a non-empty 1D table")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ParameterError("every beta must lie in (0, 1)")
        alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
        snr = alphas_cumprod / (1.0 - alphas_cumprod)
        return cls(betas, alphas_cumprod, snr)

    @property
    def T(self) -> int:
        return self.betas.numel()

    @property
    def snr_max(self) -> float:
        """Largest SNR on the discrete table, attained at t = 1."""
        return float(self.snr[0])

    def check_timestep(self, t: Timestep, allow_zero=False):
        lo = 0 if allow_zero else 1
        t_min, t_max = (int(t.min()), int(t.max())) if torch.is_tensor(t) else (int(t), int(t))
        if t_min < lo or t_max > self.T:
            raise ParameterError(f"timestep out of range [{lo}, {self.T}]: {t}")

    def alpha_bar(self, t: Timestep) -> torch.Tensor:
        """alpha_bar_t with alpha_bar_0 = 1; accepts an int or a tensor of steps."""
        self.check_timestep(t, allow_zero=True)
        table = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])
        if torch.is_tensor(t):
            return table[t.long()]
        return table[int(t)]

    def snr_at(self, t: Timestep) -> torch.Tensor:
        self.check_timestep(t)
        if torch.is_tensor(t):
            return self.snr[t.long() - 1]
        return self.snr[int(t) - 1]


def build_schedule(T: int, beta_start: float, beta_end: float, kind: str = "scaled_linear"):
    """`scaled_linear` interpolates sqrt(beta) linearly and squares it, the
    convention of latent diffusion models."""
    if T < 1:
        raise ParameterError(f"need at least one diffusion step, got T={T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    kind = kind.replace("-", "_")
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "scaled_linear":
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, T, dtype=torch.float64) ** 2
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule.from_betas(betas)


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.view(-1, *([1] * (like.dim() - 1)))


def forward_noise(z0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.

    `t` is an int or a per-sample tensor of shape (b,)."""
    sched.check_timestep(t)
    alpha_bar = sched.alpha_bar(t)
    return _broadcast(alpha_bar.sqrt(), z0) * z0 + _broadcast((1 - alpha_bar).sqrt(), z0) * eps


def predict_clean(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule):
    alpha_bar = sched.alpha_bar(t)
    return (z_t - _broadcast((1 - alpha_bar).sqrt(), z_t) * eps_hat) / _broadcast(
        alpha_bar.sqrt(), z_t
    )


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic (eta = 0) DDIM update from t to t_prev."""
    if not t > t_prev >= 0:
        raise ParameterError(f"DDIM steps must strictly decrease, got {t} -> {t_prev}")
    sched.check_timestep(t)
    z0_hat = predict_clean(z_t, eps_hat, t, sched)
    if t_prev == 0:
        return z0_hat
    alpha_bar_prev = sched.alpha_bar(t_prev)
    return (
        _broadcast(alpha_bar_prev.sqrt(), z_t) * z0_hat
        + _broadcast((1 - alpha_bar_prev).sqrt(), z_t) * eps_hat
    )


def ddim_timesteps(T: int, n_steps: int) -> List[int]:
    """Evenly spaced descending timesteps starting at T."""
    if not 1 <= n_steps <= T:
        raise ParameterError(f"need 1 <= inference steps <= {T}, got {n_steps}")
    ts = torch.linspace(T, 1, n_steps, dtype=torch.float64).round().long()
    return torch.unique_consecutive(ts).tolist()


def ddim_sample(
    predict: Callable[[torch.Tensor, int], torch.Tensor],
    z_T: torch.Tensor,
    sched: NoiseSchedule,
    n_steps: int,
) -> torch.Tensor:
    """Run the reverse trajectory from z_T down to an estimate of z_0."""
    ts = ddim_timesteps(sched.T, n_steps)
    z = z_T
    for t, t_prev in zip(ts, ts[1:] + [0]):
        z = ddim_step(z, predict(z, t), t, t_prev, sched)
    return z


def ensemble_seeds(seed: int, runs: int) -> List[int]:
    return [stream_seed(seed, "ensemble", i) for i in range(runs)]


@torch.no_grad()
def ensemble_infer(
    predict_noise: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    z_x: torch.Tensor,
    runs: int,
    seeds: Optional[Sequence[int]],
    sched: NoiseSchedule,
    n_steps: int,
    r: int,
) -> DepthMap:
    """Average the decoded normalized depth of `runs` DDIM trajectories.

    `predict_noise(z_t, z_x, t)` is the denoiser; `z_x` is one image latent
    (c, h, w). Runs are evaluated one after another in seed order so the mean
    does not depend on batching."""
    if runs < 1:
        raise ParameterError(f"need at least one inference run, got {runs}")
    if seeds is None:
        seeds = ensemble_seeds(0, runs)
    if len(seeds) != runs:
        raise ParameterError(f"got {len(seeds)} seeds for {runs} runs")

    cond = z_x.unsqueeze(0)
    depths = []
    for seed in seeds:
        g = generator_for(int(seed), "ensemble")
        z_T = torch.randn(cond.shape, generator=g, dtype=cond.dtype)

        def predict(z, t):
            t_batch = torch.full((z.shape[0],), t, dtype=torch.long)
            return predict_noise(z, cond, t_batch)

        z0_hat = ddim_sample(predict, z_T, sched, n_steps)
        depths.append(decode_depth(z0_hat, r)[0].clamp(-1.0, 1.0))
    logger.debug("averaged {} inference runs", runs)
    mean = torch.stack(depths).mean(dim=0)
    return DepthMap(mean, torch.ones_like(mean, dtype=torch.bool), unit="normalized")
