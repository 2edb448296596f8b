"""Lossless latent codec.

Stands in for a learned autoencoder: every r x r pixel block becomes r*r
channels of one latent position (space-to-depth), so decoding is exact."""

import torch
from einops import rearrange, repeat

from depthdiff.errors import ShapeError

IMAGE_CHANNELS = 3


def encode(img: torch.Tensor, r: int) -> torch.Tensor:
    """(..., k, H, W) -> (..., k*r*r, H/r, W/r), each input channel's block
    laid out row-major."""
    if img.dim() < 3:
        raise ShapeError(f"encode expects (k, H, W) or (b, k, H, W), got {tuple(img.shape)}")
    H, W = img.shape[-2:]
    if r < 1 or H % r or W % r:
        raise ShapeError(f"image size {H}x{W} is not divisible by factor {r}")
    return rearrange(img, "... k (h r1) (w r2) -> ... (k r1 r2) h w", r1=r, r2=r)


def decode(z: torch.Tensor, r: int, k: int) -> torch.Tensor:
    if z.dim() < 3:
        raise ShapeError(f"decode expects (c, h, w) or (b, c, h, w), got {tuple(z.shape)}")
    if z.shape[-3] != r * r * k:
        raise ShapeError(f"{z.shape[-3]} latent channels cannot hold {k} channels at factor {r}")
    return rearrange(z, "... (k r1 r2) h w -> ... k (h r1) (w r2)", k=k, r1=r, r2=r)


def latent_channels(r: int, k: int = IMAGE_CHANNELS) -> int:
    return r * r * k


def encode_depth(d: torch.Tensor, r: int) -> torch.Tensor:
    """Encode a normalized depth map (..., H, W), replicated onto the image's
    channel count so image and depth latents line up channel for channel."""
    d = repeat(d, "... h w -> ... k h w", k=IMAGE_CHANNELS)
    return encode(d, r)


def decode_depth(z: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of `encode_depth`; replicas are averaged."""
    return decode(z, r, IMAGE_CHANNELS).mean(dim=-3)
