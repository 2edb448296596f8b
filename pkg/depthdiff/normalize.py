"""Affine-invariant depth normalization.

The central 96% of valid depths (between the 2nd and 98th percentile) is
mapped linearly onto [-1, 1]; the tails are clamped."""

from dataclasses import dataclass, replace
from typing import Optional

import torch

from depthdiff.errors import DegenerateDepthError, EmptyInputError, ShapeError

LOWER_QUANTILE = 0.02
UPPER_QUANTILE = 0.98


@dataclass
class DepthMap:
    """A 2D depth field with a per-pixel validity mask.

    `unit` is "m" for metric depths and "normalized" for maps produced by
    `normalize`. Invalid pixels carry an arbitrary value (0 by convention) and
    are ignored everywhere."""

    values: torch.Tensor
    valid: torch.Tensor
    unit: str = "m"

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeError(f"depth maps are (H, W), got {tuple(self.values.shape)}")
        if self.valid.shape != self.values.shape:
            raise ShapeError(
                f"valid mask {tuple(self.valid.shape)} does not match values "
                f"{tuple(self.values.shape)}"
            )
        self.valid = self.valid.bool()

    @classmethod
    def from_values(cls, values: torch.Tensor, valid: Optional[torch.Tensor] = None, unit="m"):
        """Build a map whose valid pixels are finite (and positive, if metric)."""
        finite = torch.isfinite(values)
        if unit == "m":
            finite = finite & (values > 0)
        if valid is not None:
            finite = finite & valid.bool()
        return cls(torch.where(finite, values, torch.zeros_like(values)), finite, unit)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def valid_values(self) -> torch.Tensor:
        return self.values[self.valid]


@dataclass(frozen=True)
class PercentileStats:
    d2: float
    d98: float

    @property
    def degenerate(self) -> bool:
        return not self.d2 < self.d98


def percentiles(d: DepthMap) -> PercentileStats:
    """2nd/98th percentiles of the valid pixels, linearly interpolated
    between order statistics."""
    values = d.valid_values()
    if values.numel() == 0:
        raise EmptyInputError("depth map has no valid pixels")
    q = torch.quantile(
        values.double(),
        torch.tensor([LOWER_QUANTILE, UPPER_QUANTILE], dtype=torch.float64),
        interpolation="linear",
    )
    stats = PercentileStats(float(q[0]), float(q[1]))
    if stats.degenerate:
        raise DegenerateDepthError(f"depth map is degenerate: d2 = d98 = {stats.d2}")
    return stats


def normalize_values(values: torch.Tensor, stats: PercentileStats) -> torch.Tensor:
    """2 * ((d - d2) / (d98 - d2) - 1/2), clamped to [-1, 1]."""
    if stats.degenerate:
        raise DegenerateDepthError(f"cannot normalize with degenerate stats {stats}")
    scaled = 2.0 * ((values - stats.d2) / (stats.d98 - stats.d2) - 0.5)
    return scaled.clamp(-1.0, 1.0)


def denormalize_values(values: torch.Tensor, stats: PercentileStats) -> torch.Tensor:
    if stats.degenerate:
        raise DegenerateDepthError(f"cannot denormalize with degenerate stats {stats}")
    return (values / 2.0 + 0.5) * (stats.d98 - stats.d2) + stats.d2


def normalize(d: DepthMap, s: PercentileStats) -> DepthMap:
    values = normalize_values(d.values, s)
    values = torch.where(d.valid, values, torch.zeros_like(values))
    return DepthMap(values, d.valid.clone(), unit="normalized")


def denormalize(d: DepthMap, s: PercentileStats) -> DepthMap:
    values = denormalize_values(d.values, s)
    values = torch.where(d.valid, values, torch.zeros_like(values))
    return replace(d, values=values, valid=d.valid.clone(), unit="m")
