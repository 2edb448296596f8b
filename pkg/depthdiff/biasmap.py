"""Supervision reweighting for the latent noise loss.

Far pixels and depth discontinuities get more weight. The two pixel-space
maps are pooled to latent resolution, fused by a learnable sigmoid gate,
normalized over the batch, and finally blended towards uniform weighting at
noisy timesteps so the guidance only kicks in once the signal is reliable."""

from typing import Optional, Tuple

import torch
import torch.nn as nn
from torch.nn import functional as F

from depthdiff.errors import EmptyInputError, ParameterError, ShapeError
from depthdiff.ops import avg_pool2d, max_pool2d
from depthdiff.schedule import NoiseSchedule, Timestep

POOLING_MODES = ("avg", "max")
DEFAULT_KAPPA = 1e-6
DEFAULT_GAMMA = 5.0


def distance_weight(d_norm: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(d + 1) / 2 on a normalized map: 0 at the nearest depth, 1 at the farthest."""
    w = (d_norm + 1.0) / 2.0
    if valid is not None:
        w = torch.where(valid.bool(), w, torch.zeros_like(w))
    return w


def _touches_invalid(valid: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per axis, whether a pixel or its neighbour along that axis is invalid."""
    H, W = valid.shape[-2:]
    invalid = (~valid.bool()).float().reshape(-1, 1, H, W)
    along_y = F.max_pool2d(invalid, (3, 1), stride=1, padding=(1, 0))
    along_x = F.max_pool2d(invalid, (1, 3), stride=1, padding=(0, 1))
    return along_y.reshape(valid.shape) > 0, along_x.reshape(valid.shape) > 0


def structure_weight(d_norm: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Gradient magnitude of a normalized map (..., H, W), scaled by its
    per-image maximum into [0, 1]. Flat images give all zeros.

    Interior pixels use central differences, border pixels one-sided ones.
    A difference whose stencil reaches an invalid pixel is dropped, so holes
    in the map do not show up as edges."""
    H, W = d_norm.shape[-2:]
    if H < 2 or W < 2:
        raise ShapeError(f"structure weight needs at least 2x2 pixels, got {H}x{W}")
    gy, gx = torch.gradient(d_norm, dim=(-2, -1))
    if valid is not None:
        touched_y, touched_x = _touches_invalid(valid)
        gy = torch.where(touched_y, torch.zeros_like(gy), gy)
        gx = torch.where(touched_x, torch.zeros_like(gx), gx)
    magnitude = torch.sqrt(gx * gx + gy * gy)
    if valid is not None:
        magnitude = torch.where(valid.bool(), magnitude, torch.zeros_like(magnitude))
    peak = magnitude.amax(dim=(-2, -1), keepdim=True)
    peak = torch.where(peak < 1e-12, torch.ones_like(peak), peak)
    return magnitude / peak


def _pool(w: torch.Tensor, r: int, mode: str) -> torch.Tensor:
    if mode not in POOLING_MODES:
        raise ParameterError(f"unknown pooling mode {mode!r}, expected {POOLING_MODES}")
    pool = avg_pool2d if mode == "avg" else max_pool2d
    return pool(w.unsqueeze(-3), r).squeeze(-3)


def pool_weights(
    w_dist: torch.Tensor,
    w_struct: torch.Tensor,
    r: int,
    dist_pool: str = "avg",
    struct_pool: str = "max",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Downsample both maps by `r` to latent resolution. The default pairing
    averages the smooth distance map and keeps the peaks of the sparse
    structure map."""
    if w_dist.dim() == 2:
        return tuple(
            x.squeeze(0)
            for x in pool_weights(w_dist[None], w_struct[None], r, dist_pool, struct_pool)
        )
    return _pool(w_dist, r, dist_pool), _pool(w_struct, r, struct_pool)


def gate_and_normalize(
    w_dist_pooled: torch.Tensor,
    w_struct_pooled: torch.Tensor,
    tau: torch.Tensor,
    kappa: float = DEFAULT_KAPPA,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """g = sigmoid(w_dist * w_struct - tau); w = g / (<g> + kappa), where <g>
    is the mean over every element of the batch. Returns (w, g)."""
    if w_dist_pooled.numel() == 0:
        raise EmptyInputError("cannot gate an empty batch")
    if w_dist_pooled.shape != w_struct_pooled.shape:
        raise ShapeError(
            f"pooled maps differ in shape: {tuple(w_dist_pooled.shape)} vs "
            f"{tuple(w_struct_pooled.shape)}"
        )
    g = torch.sigmoid(w_dist_pooled * w_struct_pooled - tau)
    return g / (g.mean() + kappa), g


class BiasMapGate(nn.Module):
    """Holds the learnable gate bias tau (starts at 0)."""

    def __init__(self, kappa: float = DEFAULT_KAPPA):
        super().__init__()
        self.kappa = kappa
        self.tau = nn.Parameter(torch.zeros(()))

    def forward(self, w_dist_pooled, w_struct_pooled):
        w, _ = gate_and_normalize(w_dist_pooled, w_struct_pooled, self.tau, self.kappa)
        return w


def ramp_factor(snr_t: torch.Tensor, snr_max: float, gamma: float = DEFAULT_GAMMA):
    """eta = (SNR_t / SNR_max) ** gamma, in [0, 1]."""
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    return (torch.as_tensor(snr_t, dtype=torch.float64) / snr_max) ** gamma


def timestep_ramp(t: Timestep, sched: NoiseSchedule, gamma: float = DEFAULT_GAMMA):
    return ramp_factor(sched.snr_at(t), sched.snr_max, gamma)


def temporal_modulate(
    w: torch.Tensor, t: Timestep, sched: NoiseSchedule, gamma: float = DEFAULT_GAMMA
) -> torch.Tensor:
    """w_final = (1 - eta_t) + eta_t * w. A tensor `t` of shape (b,) applies
    one timestep per batch element of `w` (b, h, w)."""
    eta = timestep_ramp(t, sched, gamma).to(w.dtype)
    if eta.dim() > 0:
        eta = eta.view(-1, *([1] * (w.dim() - 1)))
    return (1 - eta) + eta * w


def biasmap_weights(
    d_norm: torch.Tensor,
    valid: torch.Tensor,
    t: torch.Tensor,
    gate: BiasMapGate,
    sched: NoiseSchedule,
    r: int,
    gamma: float = DEFAULT_GAMMA,
    use_dist: bool = True,
    use_struct: bool = True,
    dist_pool: str = "avg",
    struct_pool: str = "max",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Full pipeline for a batch of normalized maps (b, H, W) and timesteps (b,).

    A disabled component is replaced by ones, so the gate only sees the other
    factor. Returns (w_final, eta) with w_final at latent resolution."""
    ones = torch.ones_like(d_norm)
    w_dist = distance_weight(d_norm, valid) if use_dist else ones
    w_struct = structure_weight(d_norm, valid) if use_struct else ones
    w_dist_pooled, w_struct_pooled = pool_weights(w_dist, w_struct, r, dist_pool, struct_pool)
    w = gate(w_dist_pooled, w_struct_pooled)
    eta = timestep_ramp(t, sched, gamma)
    return temporal_modulate(w, t, sched, gamma), eta
