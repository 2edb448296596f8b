"""Tensor primitives the rest of the package is built on.

Dense arrays, reverse-mode differentiation and the FFT all come from torch;
this module pins down the conventions torch leaves open (half-spectrum
storage, magnitude/phase at the origin, normalization) and adds the gradient
checkers used by the test suite.

FFT convention: the forward transform is unnormalized, the inverse carries the
1/(h*w) factor (torch's "backward" norm)."""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import torch
import torch.nn as nn
from einops import einsum, rearrange
from torch.nn import functional as F

from depthdiff.errors import ContractError, ShapeError


@dataclass
class Spectrum:
    """Non-redundant half-spectrum of a real signal over the last two axes.

    `real` and `imag` have shape (..., h, w // 2 + 1)."""

    real: torch.Tensor
    imag: torch.Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(
                f"real part {tuple(self.real.shape)} and imaginary part "
                f"{tuple(self.imag.shape)} differ in shape"
            )

    @property
    def shape(self):
        return self.real.shape

    def as_complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)

    @classmethod
    def from_complex(cls, z: torch.Tensor) -> "Spectrum":
        return cls(z.real, z.imag)


def rfft2(x: torch.Tensor) -> Spectrum:
    """Per-channel 2D real FFT of a (c, h, w) tensor, or a batch of them."""
    if x.dim() not in (3, 4):
        raise ShapeError(f"rfft2 expects (c, h, w) or (b, c, h, w), got {tuple(x.shape)}")
    return Spectrum.from_complex(torch.fft.rfft2(x, norm="backward"))


def irfft2(s: Spectrum, out_width: int) -> torch.Tensor:
    """Inverse of `rfft2`. `out_width` disambiguates odd and even widths."""
    if s.real.dim() < 3:
        raise ShapeError(f"irfft2 expects at least (c, h, w//2+1), got {tuple(s.shape)}")
    if out_width < 1 or s.shape[-1] != out_width // 2 + 1:
        raise ShapeError(
            f"spectrum width {s.shape[-1]} is inconsistent with output width {out_width}"
        )
    return torch.fft.irfft2(s.as_complex(), s=(s.shape[-2], out_width), norm="backward")


def magphase(s: Spectrum) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split a spectrum into magnitude A >= 0 and phase P in (-pi, pi].

    At bins with zero magnitude the phase is 0 and both outputs have zero
    gradient; the double `where` keeps NaNs out of the backward pass."""
    re, im = s.real, s.imag
    mag_sq = re * re + im * im
    nonzero = mag_sq > 0
    safe_sq = torch.where(nonzero, mag_sq, torch.ones_like(mag_sq))
    safe_re = torch.where(nonzero, re, torch.ones_like(re))
    safe_im = torch.where(nonzero, im, torch.zeros_like(im))
    A = torch.where(nonzero, torch.sqrt(safe_sq), torch.zeros_like(mag_sq))
    P = torch.where(nonzero, torch.atan2(safe_im, safe_re), torch.zeros_like(mag_sq))
    # atan2 returns -pi for (negative, -0.0); fold it onto +pi
    P = torch.where(P <= -math.pi, torch.full_like(P, math.pi), P)
    return A, P


def recompose(A: torch.Tensor, P: torch.Tensor) -> Spectrum:
    return Spectrum(A * torch.cos(P), A * torch.sin(P))


def avg_pool2d(x: torch.Tensor, factor: int) -> torch.Tensor:
    _check_divisible(x, factor)
    return F.avg_pool2d(x, kernel_size=factor, stride=factor)


def max_pool2d(x: torch.Tensor, factor: int) -> torch.Tensor:
    _check_divisible(x, factor)
    return F.max_pool2d(x, kernel_size=factor, stride=factor)


def _check_divisible(x: torch.Tensor, factor: int):
    if factor < 1:
        raise ShapeError(f"pooling factor must be positive, got {factor}")
    if x.dim() < 3:
        raise ShapeError(f"pooling expects (c, h, w) or (b, c, h, w), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by {factor}")


class MSA(nn.Module):
    """Multi-head self-attention over the flattened spatial positions of a
    (b, c, h, w) feature map. Every position attends to every other one."""

    def __init__(self, channels: int, n_heads: int = 4):
        super().__init__()
        if channels % n_heads:
            raise ShapeError(f"{channels} channels cannot be split into {n_heads} heads")
        self.channels = channels
        self.n_heads = n_heads
        self.hs = channels // n_heads
        self.kqv = nn.Linear(channels, 3 * channels, bias=False)
        self.W = nn.Linear(channels, channels)

    def forward(self, x):
        B, C, H, W = x.shape
        assert C == self.channels
        x = rearrange(x, "b c h w -> b (h w) c")
        T = H * W
        x = self.kqv(x)
        assert x.shape == (B, T, 3 * C)
        k, q, v = rearrange(x, "b t (s nh hs) -> s b nh t hs", s=3, hs=self.hs)
        affinity_scores = einsum(q, k, "b nh ta hsa, b nh tb hsb -> b nh ta tb")
        assert affinity_scores.shape == (B, self.n_heads, T, T)
        # Scale so the softmax does not collapse onto one-hot rows as the head
        # size grows
        affinity = F.softmax(affinity_scores / math.sqrt(self.hs), dim=-1)
        x = affinity @ v
        assert x.shape == (B, self.n_heads, T, self.hs)
        x = rearrange(x, "b nh t hs -> b t (nh hs)")
        x = self.W(x)
        return rearrange(x, "b (h w) c -> b c h w", h=H, w=W)

    def value_projection(self, x):
        """What a position contributes when it is the only key: W(v)."""
        x = rearrange(x, "b c h w -> b (h w) c")
        _, _, v = self.kqv(x).split(self.channels, dim=-1)
        return rearrange(self.W(v), "b (h w) c -> b c h w", h=1)


def backward(loss: torch.Tensor):
    """Populate `.grad` on every leaf that requires it."""
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def gradient_check(fn: Callable, inputs: Sequence[torch.Tensor], eps=1e-5, rtol=1e-4, atol=1e-6):
    """Compare analytic and central-difference gradients of `fn` in 64-bit.

    Thin wrapper over torch.autograd.gradcheck with the tolerances the package
    is held to; raises on mismatch."""
    inputs = tuple(
        x.detach().double().requires_grad_(True) if x.is_floating_point() else x
        for x in inputs
    )
    return torch.autograd.gradcheck(fn, inputs, eps=eps, rtol=rtol, atol=atol)


@torch.no_grad()
def _loss_value(loss_fn: Callable[[], torch.Tensor]) -> float:
    return float(loss_fn())


def sampled_gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Dict[str, torch.nn.Parameter],
    n_samples: int,
    generator: torch.Generator,
    eps: float = 1e-5,
) -> Dict[str, Tuple[float, float]]:
    """Finite-difference check of a model's loss on randomly chosen entries.

    `loss_fn` recomputes the scalar loss from the current parameter values.
    Returns {"<name>[<flat index>]": (analytic, numerical)} for each sampled
    entry; comparing them is left to the caller."""
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {name: p.grad.detach().clone() for name, p in params.items() if p.grad is not None}

    names = sorted(analytic)
    sizes = torch.tensor([params[n].numel() for n in names], dtype=torch.float64)
    picks = torch.multinomial(sizes / sizes.sum(), n_samples, replacement=True, generator=generator)

    results = {}
    for pick in picks.tolist():
        name = names[pick]
        p = params[name]
        idx = int(torch.randint(p.numel(), (1,), generator=generator))
        flat = p.data.view(-1)
        original = flat[idx].item()
        flat[idx] = original + eps
        up = _loss_value(loss_fn)
        flat[idx] = original - eps
        down = _loss_value(loss_fn)
        flat[idx] = original
        numerical = (up - down) / (2 * eps)
        results[f"{name}[{idx}]"] = (analytic[name].view(-1)[idx].item(), numerical)
    return results
