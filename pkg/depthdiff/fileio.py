"""PFM / PGM readers and writers and the dataset manifest.

PFM: "PF" (3 channels) or "Pf" (1 channel), "W H", a scale line whose sign
gives the byte order (only negative, little-endian, is supported), then
float32 rows stored bottom-up. PGM: "P5", "W H", max value, then 8-bit
samples (max value < 256) or big-endian 16-bit samples."""

import math
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger

from depthdiff.errors import ParseError, ShapeError
from depthdiff.normalize import DepthMap
from depthdiff.synthdata import Sample
from depthdiff.utils import atomic_write

PathLike = Union[str, Path]
MANIFEST_NAME = "manifest.tsv"
_WHITESPACE = b" \t\r\n"


def _header_tokens(buf: bytes, n: int) -> Tuple[List[Tuple[str, int]], int]:
    """Read `n` whitespace-separated header tokens (skipping # comments).
    Returns [(token, offset)] and the offset of the first payload byte."""
    pos = 0
    tokens = []
    while len(tokens) < n:
        while pos < len(buf) and buf[pos] in _WHITESPACE:
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        if pos >= len(buf):
            raise ParseError("truncated header", pos)
        start = pos
        while pos < len(buf) and buf[pos] not in _WHITESPACE:
            pos += 1
        try:
            tokens.append((buf[start:pos].decode("ascii"), start))
        except UnicodeDecodeError:
            raise ParseError("non-ASCII bytes in header", start)
    if pos >= len(buf):
        raise ParseError("header is not terminated", pos)
    return tokens, pos + 1


def _parse_int(token: str, offset: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"{what} is not an integer: {token!r}", offset)
    if value <= 0:
        raise ParseError(f"{what} must be positive, got {value}", offset)
    return value


def decode_pfm(buf: bytes) -> torch.Tensor:
    """Parse PFM bytes into a (C, H, W) float32 tensor."""
    tokens, data_offset = _header_tokens(buf, 4)
    (magic, _), (w, w_off), (h, h_off), (scale, s_off) = tokens
    if magic == "PF":
        channels = 3
    elif magic == "Pf":
        channels = 1
    else:
        raise ParseError(f"not a PFM file (magic {magic!r})", 0)
    width = _parse_int(w, w_off, "width")
    height = _parse_int(h, h_off, "height")
    try:
        scale = float(scale)
    except ValueError:
        raise ParseError(f"scale is not a number: {scale!r}", s_off)
    if not math.isfinite(scale) or scale == 0:
        raise ParseError(f"scale must be finite and non-zero, got {scale}", s_off)
    if scale > 0:
        raise ParseError("big-endian PFM (positive scale) is not supported", s_off)

    count = width * height * channels
    available = (len(buf) - data_offset) // 4
    if available < count:
        raise ParseError(
            f"truncated payload: expected {count} floats, found {available}",
            data_offset + available * 4,
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=data_offset)
    data = data.reshape(height, width, channels)[::-1]
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)).astype(np.float32))


def encode_pfm(x: torch.Tensor) -> bytes:
    if x.dim() == 2:
        x = x[None]
    if x.dim() != 3 or x.shape[0] not in (1, 3):
        raise ShapeError(f"PFM holds (H, W), (1, H, W) or (3, H, W), got {tuple(x.shape)}")
    channels, height, width = x.shape
    magic = "PF" if channels == 3 else "Pf"
    header = f"{magic}\n{width} {height}\n-1.0\n".encode("ascii")
    data = x.detach().cpu().to(torch.float32).numpy().transpose(1, 2, 0)[::-1]
    return header + np.ascontiguousarray(data).astype("<f4").tobytes()


def decode_pgm(buf: bytes) -> torch.Tensor:
    """Parse binary PGM bytes into an (H, W) float32 tensor scaled to [0, 1]."""
    tokens, data_offset = _header_tokens(buf, 4)
    (magic, _), (w, w_off), (h, h_off), (maxval, m_off) = tokens
    if magic != "P5":
        raise ParseError(f"not a binary PGM file (magic {magic!r})", 0)
    width = _parse_int(w, w_off, "width")
    height = _parse_int(h, h_off, "height")
    try:
        maxval = int(maxval)
    except ValueError:
        raise ParseError(f"max value is not an integer: {maxval!r}", m_off)
    if not 0 < maxval <= 65535:
        raise ParseError(f"unsupported max value {maxval}", m_off)

    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    itemsize = np.dtype(dtype).itemsize
    count = width * height
    available = (len(buf) - data_offset) // itemsize
    if available < count:
        raise ParseError(
            f"truncated payload: expected {count} samples, found {available}",
            data_offset + available * itemsize,
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=data_offset)
    return torch.from_numpy(data.reshape(height, width).astype(np.float32) / maxval)


def encode_pgm(x: torch.Tensor, maxval: int = 65535) -> bytes:
    if x.dim() != 2:
        raise ShapeError(f"PGM holds one (H, W) channel, got {tuple(x.shape)}")
    if not 0 < maxval <= 65535:
        raise ValueError(f"unsupported max value {maxval}")
    height, width = x.shape
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    scaled = torch.round(x.detach().cpu().double().clamp(0, 1) * maxval).numpy()
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    return header + scaled.astype(dtype).tobytes()


def write_bytes(path: PathLike, payload: bytes):
    with atomic_write(path, "wb") as f:
        f.write(payload)


def read_pfm(path: PathLike) -> torch.Tensor:
    return decode_pfm(Path(path).read_bytes())


def write_pfm(path: PathLike, x: torch.Tensor):
    write_bytes(path, encode_pfm(x))


def read_pgm(path: PathLike) -> torch.Tensor:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path: PathLike, x: torch.Tensor, maxval: int = 65535):
    write_bytes(path, encode_pgm(x, maxval))


def read_depth(path: PathLike) -> DepthMap:
    """Depth PFM; zero, negative and non-finite values are invalid pixels."""
    return DepthMap.from_values(read_pfm(path)[0])


def write_depth(path: PathLike, d: DepthMap):
    write_pfm(path, torch.where(d.valid, d.values, torch.zeros_like(d.values)))


def read_image(paths: Sequence[PathLike]) -> torch.Tensor:
    """A 3-channel image from one PFM or from three single-channel PGMs."""
    if len(paths) == 1:
        return read_pfm(paths[0])
    return torch.stack([read_pgm(p) for p in paths])


def write_sample(sample: Sample, directory: PathLike, stem: str, image_format: str = "pfm"):
    """Write one sample; returns (image paths, depth path)."""
    directory = Path(directory)
    depth_path = directory / f"{stem}_depth.pfm"
    write_depth(depth_path, sample.depth)
    if image_format == "pfm":
        image_paths = [directory / f"{stem}_image.pfm"]
        write_pfm(image_paths[0], sample.image)
    elif image_format == "pgm":
        image_paths = [directory / f"{stem}_image_{c}.pgm" for c in range(sample.image.shape[0])]
        for path, channel in zip(image_paths, sample.image):
            write_pgm(path, channel)
    else:
        raise ValueError(f"unknown image format {image_format!r}")
    return image_paths, depth_path


def read_sample(image_paths: Sequence[PathLike], depth_path: PathLike, seed: int = 0) -> Sample:
    return Sample(read_image(image_paths), read_depth(depth_path), seed)


def write_dataset(samples: Sequence[Sample], directory: PathLike, image_format: str = "pfm"):
    """Write every sample plus a manifest (image paths, depth path, seed per line)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        image_paths, depth_path = write_sample(sample, directory, f"{i:05d}", image_format)
        images = ",".join(p.name for p in image_paths)
        lines.append(f"{images}\t{depth_path.name}\t{sample.seed}")
    manifest = directory / MANIFEST_NAME
    with atomic_write(manifest) as f:
        f.write("\n".join(lines) + "\n")
    logger.info("wrote {} samples to {}", len(samples), directory)
    return manifest


def read_manifest(manifest: PathLike) -> List[Tuple[str, List[Path], Path, int]]:
    """Entries (stem, image paths, depth path, seed), paths resolved relative
    to the manifest's directory."""
    manifest = Path(manifest)
    root = manifest.parent
    entries = []
    offset = 0
    for line in manifest.read_bytes().splitlines(keepends=True):
        try:
            text = line.decode("utf-8").rstrip("\r\n")
        except UnicodeDecodeError as e:
            raise ParseError(f"manifest is not valid UTF-8: {e.reason}", offset + e.start)
        if text:
            fields = text.split("\t")
            if len(fields) != 3:
                raise ParseError(f"manifest line has {len(fields)} fields, expected 3", offset)
            images, depth, seed = fields
            try:
                seed = int(seed)
            except ValueError:
                raise ParseError(f"seed is not an integer: {seed!r}", offset)
            stem = Path(depth).name.removesuffix("_depth.pfm")
            entries.append((stem, [root / p for p in images.split(",")], root / depth, seed))
        offset += len(line)
    return entries


def read_dataset(directory_or_manifest: PathLike) -> List[Sample]:
    path = Path(directory_or_manifest)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    return [read_sample(images, depth, seed) for _, images, depth, seed in read_manifest(manifest)]
