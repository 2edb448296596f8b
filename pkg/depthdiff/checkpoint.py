"""Checkpoint container.

A checkpoint is a directory with three files:

    tensors.bin   every tensor's values as little-endian float32, back to back
    manifest.txt  header lines ("# key value") then one line per tensor:
                  name <TAB> shape (comma separated) <TAB> offset <TAB> count
    config.yaml   the resolved run configuration

load(save(x)) reproduces every float32 tensor bit for bit."""

import os
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger
from omegaconf import OmegaConf

from depthdiff.errors import ParseError

FORMAT_NAME = "depthdiff-checkpoint"
FORMAT_VERSION = 1
TENSORS_FILE = "tensors.bin"
MANIFEST_FILE = "manifest.txt"
CONFIG_FILE = "config.yaml"


def save_tensors(
    path: Union[str, Path],
    tensors: Dict[str, torch.Tensor],
    meta: Optional[Dict[str, str]] = None,
    config=None,
):
    """Write a checkpoint directory atomically (temp dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        lines = [f"# format {FORMAT_NAME} {FORMAT_VERSION}"]
        for key, value in (meta or {}).items():
            lines.append(f"# {key} {value}")
        offset = 0
        with open(tmp / TENSORS_FILE, "wb") as f:
            for name, tensor in tensors.items():
                if "\t" in name or "\n" in name:
                    raise ValueError(f"tensor name {name!r} contains a separator")
                values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
                f.write(values.astype("<f4", copy=False).tobytes())
                shape = ",".join(str(s) for s in tensor.shape)
                lines.append(f"{name}\t{shape}\t{offset}\t{values.size}")
                offset += values.size
        (tmp / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
        if config is not None:
            OmegaConf.save(config, tmp / CONFIG_FILE)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info("saved {} tensors to {}", len(tensors), path)


def load_tensors(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], Dict[str, str]]:
    path = Path(path)
    manifest = (path / MANIFEST_FILE).read_text().splitlines()
    meta: Dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(manifest, start=1):
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            meta[key] = value
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"{path / MANIFEST_FILE}:{lineno}: expected 4 fields, got {len(fields)}")
        name, shape, offset, count = fields
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        entries.append((name, shape, int(offset), int(count)))
    if not meta.get("format", "").startswith(FORMAT_NAME):
        raise ParseError(f"{path / MANIFEST_FILE} is not a {FORMAT_NAME} manifest")

    data = np.fromfile(path / TENSORS_FILE, dtype="<f4")
    tensors = {}
    for name, shape, offset, count in entries:
        if offset + count > data.size:
            raise ParseError(f"tensor {name} runs past the end of {TENSORS_FILE}", offset * 4)
        values = data[offset : offset + count].astype(np.float32)
        tensors[name] = torch.from_numpy(values.copy()).reshape(shape)
    return tensors, meta


def load_config(path: Union[str, Path]):
    return OmegaConf.load(Path(path) / CONFIG_FILE)
