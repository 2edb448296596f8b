"""Procedural long-tail depth scenes.

Each scene is a far background plane at d_max overlapped by rectangles and
ellipses (optionally slightly slanted). Primitive depths follow
d_min + (d_max - d_min) * u ** tail_exponent with u uniform, so exponents
above 1 crowd pixels into the near range and leave the far range sparse.
The nearest primitive wins at every pixel.

The 3-channel image is rendered from the depth field: inverse-depth Lambert
shading, a per-primitive periodic texture whose frequency grows with depth,
and an edge channel from depth gradients, plus seeded noise."""

import math
from dataclasses import dataclass
from typing import List, Optional

import torch

from depthdiff.errors import ParameterError
from depthdiff.normalize import DepthMap
from depthdiff.utils import generator_for, stream_seed

_LIGHT = torch.tensor([0.3, 0.3, 1.0], dtype=torch.float64)
_LIGHT = _LIGHT / _LIGHT.norm()


@dataclass
class SceneSpec:
    image_size: int = 64
    min_primitives: int = 4
    max_primitives: int = 10
    min_extent: float = 0.3
    max_extent: float = 0.8
    d_min: float = 1.0
    d_max: float = 20.0
    tail_exponent: float = 2.0
    max_tilt: float = 0.1
    texture_scale: float = 0.05
    seed: int = 0

    def validate(self):
        if not 0 < self.d_min < self.d_max:
            raise ParameterError(f"need 0 < d_min < d_max, got ({self.d_min}, {self.d_max})")
        if self.image_size < 2:
            raise ParameterError(f"image size must be at least 2, got {self.image_size}")
        if not 0 <= self.min_primitives <= self.max_primitives:
            raise ParameterError(
                f"bad primitive count range [{self.min_primitives}, {self.max_primitives}]"
            )
        if not 0 < self.min_extent <= self.max_extent:
            raise ParameterError(f"bad extent range [{self.min_extent}, {self.max_extent}]")
        if self.tail_exponent <= 0:
            raise ParameterError(f"tail exponent must be positive, got {self.tail_exponent}")
        if self.texture_scale < 0 or self.max_tilt < 0:
            raise ParameterError("texture scale and tilt must be non-negative")


@dataclass
class Primitive:
    kind: str  # "rect" or "ellipse"
    cx: float
    cy: float
    half_w: float
    half_h: float
    depth: float
    tilt_x: float = 0.0
    tilt_y: float = 0.0
    texture_freq: float = 2.0
    texture_angle: float = 0.0


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    depth: DepthMap
    seed: int = 0


def _grid(size: int):
    coords = (torch.arange(size, dtype=torch.float64) + 0.5) / size
    y, x = torch.meshgrid(coords, coords, indexing="ij")
    return x, y


def sample_primitives(spec: SceneSpec, g: torch.Generator) -> List[Primitive]:
    def uniform(lo=0.0, hi=1.0):
        return lo + (hi - lo) * float(torch.rand((), generator=g, dtype=torch.float64))

    n = int(torch.randint(spec.min_primitives, spec.max_primitives + 1, (), generator=g))
    primitives = []
    for _ in range(n):
        kind = "rect" if uniform() < 0.5 else "ellipse"
        depth = spec.d_min + (spec.d_max - spec.d_min) * uniform() ** spec.tail_exponent
        primitives.append(
            Primitive(
                kind=kind,
                cx=uniform(),
                cy=uniform(),
                half_w=uniform(spec.min_extent, spec.max_extent) / 2,
                half_h=uniform(spec.min_extent, spec.max_extent) / 2,
                depth=depth,
                tilt_x=uniform(-spec.max_tilt, spec.max_tilt),
                tilt_y=uniform(-spec.max_tilt, spec.max_tilt),
                texture_freq=uniform(1.0, 3.0),
                texture_angle=uniform(0.0, math.pi),
            )
        )
    return primitives


def render_depth(primitives: List[Primitive], size: int, d_min: float, d_max: float):
    """Rasterize primitives over a background at d_max, nearest wins.

    Returns (depth, owner) where owner[y, x] is the index of the visible
    primitive or -1 for background."""
    x, y = _grid(size)
    depth = torch.full((size, size), d_max, dtype=torch.float64)
    owner = torch.full((size, size), -1, dtype=torch.long)
    for i, p in enumerate(primitives):
        dx, dy = x - p.cx, y - p.cy
        if p.kind == "rect":
            inside = (dx.abs() <= p.half_w) & (dy.abs() <= p.half_h)
        elif p.kind == "ellipse":
            inside = (dx / p.half_w) ** 2 + (dy / p.half_h) ** 2 <= 1.0
        else:
            raise ParameterError(f"unknown primitive kind {p.kind!r}")
        plane = (p.depth * (1.0 + p.tilt_x * dx + p.tilt_y * dy)).clamp(d_min, d_max)
        nearer = inside & (plane < depth)
        depth = torch.where(nearer, plane, depth)
        owner = torch.where(nearer, torch.full_like(owner, i), owner)
    return depth, owner


def render_image(
    depth: torch.Tensor,
    owner: torch.Tensor,
    primitives: List[Primitive],
    d_min: float,
    texture_scale: float,
    g: torch.Generator,
) -> torch.Tensor:
    size = depth.shape[-1]
    x, y = _grid(size)
    gy, gx = torch.gradient(depth * size / d_min)
    normals = torch.stack([-gx, -gy, torch.ones_like(gx)])
    normals = normals / normals.norm(dim=0, keepdim=True)
    lambert = torch.einsum("chw,c->hw", normals, _LIGHT).clamp(0, 1)
    shading = (d_min / depth) * (0.6 + 0.4 * lambert)

    pattern = torch.zeros_like(depth)
    for i, p in enumerate(primitives):
        mine = owner == i
        if not bool(mine.any()):
            continue
        # Perspective: the same surface texture looks finer further away
        freq = p.texture_freq * torch.sqrt(depth / d_min)
        phase = 2 * math.pi * freq * (x * math.cos(p.texture_angle) + y * math.sin(p.texture_angle))
        pattern = torch.where(mine, torch.sin(phase), pattern)

    edges = torch.tanh(torch.sqrt(gx * gx + gy * gy) / 4.0)
    noise = torch.randn((2, size, size), generator=g, dtype=torch.float64) * texture_scale
    texture = 0.5 + 0.35 * pattern + noise[0]
    edge_channel = 0.25 + 0.5 * edges + 0.15 * pattern + noise[1]
    image = torch.stack([shading, texture, edge_channel]).clamp(0.0, 1.0)
    return image.to(torch.float32)


def render_sample(spec: SceneSpec, seed: int, primitives: Optional[List[Primitive]] = None):
    """Render the scene for `seed`; explicit `primitives` bypass sampling."""
    spec.validate()
    g = generator_for(seed, "data")
    if primitives is None:
        primitives = sample_primitives(spec, g)
    depth, owner = render_depth(primitives, spec.image_size, spec.d_min, spec.d_max)
    image = render_image(depth, owner, primitives, spec.d_min, spec.texture_scale, g)
    depth_map = DepthMap.from_values(depth.to(torch.float32))
    return Sample(image, depth_map, seed)


def generate(spec: SceneSpec, n: int) -> List[Sample]:
    """n samples, sample i seeded from (spec.seed, i); bit-identical across runs."""
    if n < 1:
        raise ParameterError(f"need at least one sample, got n={n}")
    spec.validate()
    return [render_sample(spec, stream_seed(spec.seed, "data", i)) for i in range(n)]
