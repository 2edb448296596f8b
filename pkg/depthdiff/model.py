import math
from typing import Dict, List

import torch
import torch.nn as nn
from einops import rearrange
from torch.nn import functional as F

from depthdiff.errors import ParameterError, ShapeError
from depthdiff.lfm import LatentFrequencyModulation, lfm_parameter_count

ENCODER_EARLY = "encoder-early"
MIDDLE = "middle"
DECODER_EARLY = "decoder-early"
DECODER_PENULTIMATE = "decoder-penultimate"
DECODER_FINAL = "decoder-final"
ALL_BLOCKS = "all-blocks"
NONE = "none"
LFM_PLACEMENTS = (
    NONE,
    ENCODER_EARLY,
    MIDDLE,
    DECODER_EARLY,
    DECODER_PENULTIMATE,
    DECODER_FINAL,
    ALL_BLOCKS,
)


def block_positions(depth: int) -> Dict[str, int]:
    """Every block output that can host a modulation block, with its level."""
    positions = {f"encoder.{i}": i for i in range(depth)}
    positions["middle"] = depth - 1
    for j, level in enumerate(reversed(range(depth))):
        positions[f"decoder.{j}"] = level
    return positions


def lfm_positions(depth: int, placement: str) -> Dict[str, int]:
    """Block outputs followed by a modulation block for `placement`, keyed by
    ModuleDict-safe names ("decoder_1"), valued by resolution level."""
    named = {
        ENCODER_EARLY: "encoder.0",
        MIDDLE: "middle",
        DECODER_EARLY: "decoder.0",
        DECODER_PENULTIMATE: f"decoder.{depth - 2}",
        DECODER_FINAL: f"decoder.{depth - 1}",
    }
    positions = block_positions(depth)
    if placement == NONE:
        return {}
    if placement == ALL_BLOCKS:
        keys = list(positions)
    else:
        keys = [named[placement]]
    return {k.replace(".", "_"): positions[k] for k in keys}


def adapt_input_layer(weight: torch.Tensor) -> torch.Tensor:
    """Widen a first conv from k to 2k input channels.

    The weights are duplicated along the input axis and halved, so the layer
    applied to (u, u) gives exactly what the original gives on u."""
    assert weight.dim() == 4
    return torch.cat([weight, weight], dim=1) / 2


def expand_conditioning_input(state_dict: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Upgrade a state dict trained without image conditioning to the
    concatenated-input layout."""
    state_dict = dict(state_dict)
    state_dict["conv_in.weight"] = adapt_input_layer(state_dict["conv_in.weight"])
    return state_dict


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of integer timesteps, (b,) -> (b, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class UNetBlock(nn.Module):
    """conv -> relu -> (+ time) -> conv -> relu"""

    def __init__(self, in_channels, out_channels, time_dim):
        super().__init__()
        self.conv_a = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.conv_b = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x, temb):
        x = F.relu(self.conv_a(x))
        x = x + rearrange(self.time_proj(temb), "b c -> b c 1 1")
        return F.relu(self.conv_b(x))


class DepthUNet(nn.Module):
    """Conditional noise predictor.

    Input is the channel concatenation (image latent, noisy depth latent).
    Encoder levels 0..D-1 each run one block (stride-2 convs in between), a
    middle block runs at the coarsest level, and decoder levels D-1..0 merge
    the matching encoder output through a skip concatenation (nearest
    upsampling in between). A frequency modulation block can follow any block
    output, before that output feeds the next stage."""

    def __init__(
        self,
        latent_channels: int,
        latent_size: int,
        base_channels: int = 32,
        depth: int = 3,
        time_dim: int = 64,
        lfm_placement: str = DECODER_PENULTIMATE,
        router_variant: str = "LE+SA+PM",
        n_masks: int = 4,
        lfm_learnable_masks: bool = True,
    ):
        super().__init__()
        if lfm_placement not in LFM_PLACEMENTS:
            raise ParameterError(f"unknown LFM placement {lfm_placement!r}, expected {LFM_PLACEMENTS}")
        if depth < 3:
            # below three levels the early and penultimate decoder blocks coincide
            raise ParameterError(f"need at least three resolutions, got depth={depth}")
        if latent_size % 2 ** (depth - 1):
            raise ParameterError(f"latent size {latent_size} cannot be halved {depth - 1} times")
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.depth = depth
        self.time_dim = time_dim
        self.lfm_placement = lfm_placement

        widths = [base_channels * 2**i for i in range(depth)]
        sizes = [latent_size // 2**i for i in range(depth)]
        self.widths, self.sizes = widths, sizes

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.ReLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(2 * latent_channels, widths[0], 3, padding=1)
        self._init_conditioning_input(latent_channels, widths[0])

        self.encoder = nn.ModuleList(
            [UNetBlock(widths[i], widths[i], time_dim) for i in range(depth)]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(depth - 1)]
        )
        self.middle = UNetBlock(widths[-1], widths[-1], time_dim)
        self.decoder = nn.ModuleList(
            [
                UNetBlock(
                    widths[i] + (widths[i + 1] if i < depth - 1 else widths[-1]),
                    widths[i],
                    time_dim,
                )
                for i in reversed(range(depth))
            ]
        )
        self.conv_out = nn.Conv2d(widths[0], latent_channels, 3, padding=1)

        self.lfm = nn.ModuleDict(
            {
                name: LatentFrequencyModulation(
                    widths[level],
                    sizes[level],
                    sizes[level],
                    n_masks=n_masks,
                    variant=router_variant,
                    learnable_masks=lfm_learnable_masks,
                )
                for name, level in self.lfm_positions().items()
            }
        )

    def _init_conditioning_input(self, k, out_channels):
        # Mirror fine-tuning from an unconditional backbone: start the k-channel
        # first conv as usual, then widen it to take the image latent too
        template = nn.Conv2d(k, out_channels, 3, padding=1)
        with torch.no_grad():
            self.conv_in.weight.copy_(adapt_input_layer(template.weight))
            self.conv_in.bias.copy_(template.bias)

    def lfm_positions(self) -> Dict[str, int]:
        return lfm_positions(self.depth, self.lfm_placement)

    def _modulate(self, name: str, x: torch.Tensor) -> torch.Tensor:
        key = name.replace(".", "_")
        if key in self.lfm:
            return self.lfm[key](x)
        return x

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        assert C == 2 * self.latent_channels
        assert H == W == self.latent_size
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        assert temb.shape == (B, self.time_dim)

        h = self.conv_in(x)
        skips: List[torch.Tensor] = []
        for i, block in enumerate(self.encoder):
            h = self._modulate(f"encoder.{i}", block(h, temb))
            assert h.shape == (B, self.widths[i], self.sizes[i], self.sizes[i])
            skips.append(h)
            if i < self.depth - 1:
                h = self.downs[i](h)

        h = self._modulate("middle", self.middle(h, temb))

        for j, block in enumerate(self.decoder):
            level = self.depth - 1 - j
            if h.shape[-1] != self.sizes[level]:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips[level]], dim=1)
            h = self._modulate(f"decoder.{j}", block(h, temb))
            assert h.shape == (B, self.widths[level], self.sizes[level], self.sizes[level])

        out = self.conv_out(h)
        assert out.shape == (B, self.latent_channels, H, W)
        return out

    def lfm_parameter_count(self) -> int:
        return sum(p.numel() for p in self.lfm.parameters())


def predict_noise(z_t: torch.Tensor, z_x: torch.Tensor, t: torch.Tensor, model: DepthUNet):
    """Noise estimate for noisy depth latents conditioned on image latents."""
    if z_t.shape != z_x.shape:
        raise ShapeError(
            f"noisy latent {tuple(z_t.shape)} and image latent {tuple(z_x.shape)} must match"
        )
    return model(torch.cat([z_x, z_t], dim=1), t)


def placement_parameter_count(
    base_channels: int,
    depth: int,
    latent_size: int,
    placement: str,
    n_masks: int = 4,
    variant: str = "LE+SA+PM",
) -> int:
    """Analytic LFM parameter cost of a placement, without building the model."""
    total = 0
    for level in lfm_positions(depth, placement).values():
        c = base_channels * 2**level
        s = latent_size // 2**level
        total += lfm_parameter_count(c, s, s, n_masks, variant)
    return total
