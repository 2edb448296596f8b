from pathlib import Path
from typing import List, Optional, Tuple, Union

import torch
from loguru import logger

from depthdiff.errors import UsageError
from depthdiff.fileio import MANIFEST_NAME, read_image, read_manifest, write_pfm, write_pgm
from depthdiff.lightning_module import DepthDiffusionLightning
from depthdiff.normalize import DepthMap

PREVIEW_MAXVAL = 255


def load_model(checkpoint: Union[str, Path]) -> DepthDiffusionLightning:
    checkpoint = Path(checkpoint)
    if not checkpoint.is_dir():
        raise UsageError(f"no checkpoint at {checkpoint}")
    module = DepthDiffusionLightning.from_checkpoint(checkpoint)
    module.eval()
    return module


def image_inputs(path: Union[str, Path]) -> List[Tuple[str, List[Path]]]:
    """(stem, image files) for a single image PFM or every entry of a dataset
    manifest (or a directory holding one)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise UsageError(f"no image or manifest at {path}")
    if path.suffix == ".pfm":
        return [(path.stem.removesuffix("_image"), [path])]
    return [(stem, images) for stem, images, _, _ in read_manifest(path)]


def preview(d: DepthMap) -> torch.Tensor:
    """Normalized depth in [-1, 1] mapped onto [0, 1] for an 8-bit preview."""
    return ((d.values.double() + 1) / 2).clamp(0, 1)


def write_prediction(d: DepthMap, out_dir: Path, stem: str) -> Tuple[Path, Path]:
    depth_path = out_dir / f"{stem}_depth.pfm"
    preview_path = out_dir / f"{stem}_preview.pgm"
    write_pfm(depth_path, d.values)
    write_pgm(preview_path, preview(d), maxval=PREVIEW_MAXVAL)
    return depth_path, preview_path


def infer(
    checkpoint: Union[str, Path],
    image: Union[str, Path],
    out_dir: Union[str, Path],
    runs: Optional[int] = None,
    seed: int = 0,
) -> List[Path]:
    """Ensemble depth for one image or a manifest of images; writes
    `<stem>_depth.pfm` (normalized depth) and `<stem>_preview.pgm` per image."""
    module = load_model(checkpoint)
    inputs = image_inputs(image)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, image_paths in inputs:
        d = module.predict_depth(read_image(image_paths), runs=runs, seed=seed)
        written.extend(write_prediction(d, out_dir, stem))
        logger.info("predicted {} ({} runs)", stem, runs or module.config.schedule.ensemble_runs)
    return written
