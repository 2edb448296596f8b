"""Latent frequency modulation.

A bank of N global masks reshapes the magnitude spectrum of a feature map
(phase is left untouched), and a small routing network decides per pixel how
to blend the N filtered candidates. The blend is added back onto the input."""

from typing import Tuple

import torch
import torch.nn as nn
from einops import einsum
from torch.nn import functional as F

from depthdiff.errors import ParameterError, ShapeError
from depthdiff.ops import MSA, irfft2, magphase, recompose, rfft2

# Routing network designs, from the bare projection up to the full router:
# PM = 1x1 projection, LE = two 3x3 conv local extractor, LKC = 7x7 depthwise
# large-kernel conv, SA = multi-head self-attention.
ROUTER_VARIANTS = ("PM", "LE+PM", "LE+LKC+PM", "LE+SA+PM")
LARGE_KERNEL = 7
N_HEADS = 4


class SpectralBank(nn.Module):
    """N real masks over the half-spectrum grid, shared across channels.

    Masks start at 1 (identity response). With `learnable=False` they stay
    there, which turns the block into a fixed FFT round trip."""

    def __init__(self, n_masks: int, h: int, w: int, learnable: bool = True):
        super().__init__()
        if n_masks < 1:
            raise ParameterError(f"need at least one spectral mask, got {n_masks}")
        self.h, self.w = h, w
        self.masks = nn.Parameter(
            torch.ones(n_masks, h, w // 2 + 1), requires_grad=learnable
        )

    @property
    def n_masks(self):
        return self.masks.shape[0]

    def apply_masks(self, F_in: torch.Tensor) -> torch.Tensor:
        """(b, c, h, w) -> (b, N, c, h, w) candidates, one per mask."""
        if F_in.dim() != 4 or F_in.shape[-2:] != (self.h, self.w):
            raise ShapeError(
                f"features {tuple(F_in.shape)} do not match the {self.h}x{self.w} mask grid"
            )
        A, P = magphase(rfft2(F_in))
        A = A.unsqueeze(1) * self.masks[None, :, None].to(A.dtype)
        P = P.unsqueeze(1).expand_as(A)
        return irfft2(recompose(A, P), out_width=self.w)


class Router(nn.Module):
    """Content-aware routing network producing a per-pixel softmax over N masks."""

    def __init__(self, channels: int, n_masks: int, variant: str = "LE+SA+PM"):
        super().__init__()
        if variant not in ROUTER_VARIANTS:
            raise ParameterError(f"unknown router variant {variant!r}, expected {ROUTER_VARIANTS}")
        self.variant = variant
        self.channels = channels
        layers = []
        if "LE" in variant:
            layers += [
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.ReLU(),
            ]
        if "LKC" in variant:
            layers.append(
                nn.Conv2d(
                    channels,
                    channels,
                    LARGE_KERNEL,
                    padding=LARGE_KERNEL // 2,
                    groups=channels,
                )
            )
        if "SA" in variant:
            layers.append(MSA(channels, N_HEADS))
        self.context = nn.Sequential(*layers)
        self.proj = nn.Conv2d(channels, n_masks, 1)

    def logits(self, F_in: torch.Tensor) -> torch.Tensor:
        if F_in.dim() != 4 or F_in.shape[1] != self.channels:
            raise ShapeError(
                f"router expects (b, {self.channels}, h, w), got {tuple(F_in.shape)}"
            )
        return self.proj(self.context(F_in))

    def forward(self, F_in: torch.Tensor) -> torch.Tensor:
        """Mixing map S of shape (b, N, h, w); sums to 1 over N at every pixel."""
        return F.softmax(self.logits(F_in), dim=1)


class LatentFrequencyModulation(nn.Module):
    def __init__(
        self,
        channels: int,
        h: int,
        w: int,
        n_masks: int = 4,
        variant: str = "LE+SA+PM",
        learnable_masks: bool = True,
    ):
        super().__init__()
        self.bank = SpectralBank(n_masks, h, w, learnable=learnable_masks)
        self.router = Router(channels, n_masks, variant)

    def route(self, F_in):
        return self.router(F_in)

    def apply_masks(self, F_in):
        return self.bank.apply_masks(F_in)

    def mix(self, F_in) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (F_mixed, S_select, candidates)."""
        S = self.route(F_in)
        candidates = self.apply_masks(F_in)
        mixed = einsum(S, candidates, "b n h w, b n c h w -> b c h w")
        return mixed, S, candidates

    def forward(self, F_in):
        mixed, _, _ = self.mix(F_in)
        return F_in + mixed


def router_parameter_count(channels: int, n_masks: int, variant: str) -> int:
    c = channels
    count = c * n_masks + n_masks  # 1x1 projection
    if "LE" in variant:
        count += 2 * (9 * c * c + c)
    if "LKC" in variant:
        count += LARGE_KERNEL * LARGE_KERNEL * c + c
    if "SA" in variant:
        count += 3 * c * c + c * c + c  # kqv without bias, output projection
    return count


def lfm_parameter_count(channels: int, h: int, w: int, n_masks: int, variant: str) -> int:
    """Analytic parameter count of one block (bank plus router)."""
    return n_masks * h * (w // 2 + 1) + router_parameter_count(channels, n_masks, variant)
