"""Affine-invariant depth metrics.

Predictions are aligned to the ground truth with a least-squares scale and
shift before scoring. The range breakdown places every pixel by the
fractional position of its true depth between that image's 2nd and 98th
percentiles, so "far" means the same thing on every dataset."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import torch
from loguru import logger

from depthdiff.errors import AlignmentError, EmptyInputError, ShapeError, UsageError
from depthdiff.fileio import read_depth, read_pfm
from depthdiff.normalize import DepthMap, percentiles
from depthdiff.utils import atomic_write

MIN_DEPTH = 1e-6
DELTA1_THRESHOLD = 1.25
BAND_EDGES = (0.2, 0.4, 0.6)
BAND_NAMES = ("0_20", "20_40", "40_60", "60_100")
AGGREGATE_ROW = "ALL"
METRIC_COLUMNS = (
    ["image", "absrel", "delta1"]
    + [f"delta1_{b}" for b in BAND_NAMES]
    + [f"n_{b}" for b in BAND_NAMES]
    + ["n_valid"]
)


@dataclass
class MetricReport:
    absrel: float
    delta1: float
    band_hits: List[int] = field(default_factory=lambda: [0] * len(BAND_NAMES))
    band_counts: List[int] = field(default_factory=lambda: [0] * len(BAND_NAMES))
    n_valid: int = 0

    @property
    def band_delta1(self) -> List[Optional[float]]:
        """Per-band delta1; None for bands without pixels."""
        return [h / n if n else None for h, n in zip(self.band_hits, self.band_counts)]

    def row(self, name: str) -> list:
        bands = ["" if v is None else v for v in self.band_delta1]
        return [name, self.absrel, self.delta1, *bands, *self.band_counts, self.n_valid]


def _shared_valid(pred: DepthMap, gt: DepthMap) -> torch.Tensor:
    if pred.values.shape != gt.values.shape:
        raise ShapeError(
            f"prediction {tuple(pred.values.shape)} and ground truth "
            f"{tuple(gt.values.shape)} differ in shape"
        )
    return pred.valid & gt.valid


def alignment(pred: DepthMap, gt: DepthMap) -> Tuple[float, float]:
    """Least-squares (scale, shift) minimizing sum (a * pred + b - gt)^2."""
    mask = _shared_valid(pred, gt)
    if int(mask.sum()) < 2:
        raise AlignmentError(f"need at least 2 shared valid pixels, got {int(mask.sum())}")
    p = pred.values[mask].double()
    g = gt.values[mask].double()
    if bool((g == g[0]).all()):
        raise AlignmentError("ground truth is constant over the valid pixels")
    if bool((p == p[0]).all()):
        raise AlignmentError("prediction is constant over the valid pixels")
    A = torch.stack([p, torch.ones_like(p)], dim=1)
    solution = torch.linalg.lstsq(A, g[:, None]).solution
    return float(solution[0, 0]), float(solution[1, 0])


def align(pred: DepthMap, gt: DepthMap) -> DepthMap:
    """Apply the least-squares scale and shift; values are clamped to at
    least 1e-6 m. Validity is the intersection of both masks."""
    a, b = alignment(pred, gt)
    values = (a * pred.values.double() + b).clamp(min=MIN_DEPTH).to(gt.values.dtype)
    mask = _shared_valid(pred, gt)
    return DepthMap(torch.where(mask, values, torch.zeros_like(values)), mask, unit="m")


def _pairs(pred_aligned: DepthMap, gt: DepthMap):
    mask = _shared_valid(pred_aligned, gt)
    if not bool(mask.any()):
        raise EmptyInputError("prediction and ground truth share no valid pixels")
    return pred_aligned.values[mask].double(), gt.values[mask].double(), mask


def absrel(pred_aligned: DepthMap, gt: DepthMap) -> float:
    p, g, _ = _pairs(pred_aligned, gt)
    return float(((p - g).abs() / g).mean())


def _delta1_hits(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    return torch.maximum(p / g, g / p) < DELTA1_THRESHOLD


def delta1(pred_aligned: DepthMap, gt: DepthMap) -> float:
    p, g, _ = _pairs(pred_aligned, gt)
    return float(_delta1_hits(p, g).double().mean())


def depth_bands(gt: DepthMap) -> torch.Tensor:
    """Band index 0..3 per pixel from the clamped percentile position of gt."""
    stats = percentiles(gt)
    position = ((gt.values.double() - stats.d2) / (stats.d98 - stats.d2)).clamp(0, 1)
    return torch.bucketize(position, torch.tensor(BAND_EDGES, dtype=torch.float64), right=True)


def band_counts(pred_aligned: DepthMap, gt: DepthMap) -> Tuple[List[int], List[int]]:
    """(delta1 hits, valid pixels) per band for one image."""
    p, g, mask = _pairs(pred_aligned, gt)
    bands = depth_bands(gt)[mask]
    hits = _delta1_hits(p, g)
    n_bands = len(BAND_NAMES)
    counts = torch.bincount(bands, minlength=n_bands)
    band_hits = torch.bincount(bands[hits], minlength=n_bands)
    return band_hits.tolist(), counts.tolist()


def range_breakdown(
    pred_aligned: Union[DepthMap, Sequence[DepthMap]],
    gt: Union[DepthMap, Sequence[DepthMap]],
) -> List[Optional[float]]:
    """Per-band delta1 over one image or a set of images; images contribute
    in proportion to their pixel count in each band. Empty bands are None."""
    if isinstance(pred_aligned, DepthMap):
        pred_aligned, gt = [pred_aligned], [gt]
    hits = [0] * len(BAND_NAMES)
    counts = [0] * len(BAND_NAMES)
    for p, g in zip(pred_aligned, gt):
        h, n = band_counts(p, g)
        hits = [a + b for a, b in zip(hits, h)]
        counts = [a + b for a, b in zip(counts, n)]
    return [h / n if n else None for h, n in zip(hits, counts)]


def evaluate_pair(pred: DepthMap, gt: DepthMap) -> MetricReport:
    aligned = align(pred, gt)
    hits, counts = band_counts(aligned, gt)
    return MetricReport(
        absrel=absrel(aligned, gt),
        delta1=delta1(aligned, gt),
        band_hits=hits,
        band_counts=counts,
        n_valid=sum(counts),
    )


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Image-averaged AbsRel and delta1; pixel-weighted band delta1."""
    if not reports:
        raise EmptyInputError("no metric reports to aggregate")
    n_bands = len(BAND_NAMES)
    return MetricReport(
        absrel=sum(r.absrel for r in reports) / len(reports),
        delta1=sum(r.delta1 for r in reports) / len(reports),
        band_hits=[sum(r.band_hits[i] for r in reports) for i in range(n_bands)],
        band_counts=[sum(r.band_counts[i] for r in reports) for i in range(n_bands)],
        n_valid=sum(r.n_valid for r in reports),
    )


def read_prediction(path: Union[str, Path]) -> DepthMap:
    """Predictions are affine-invariant, so any finite value is valid."""
    return DepthMap.from_values(read_pfm(path)[0], unit="normalized")


def evaluate_dirs(
    pred_dir: Union[str, Path], gt_dir: Union[str, Path], out_csv: Union[str, Path]
):
    """Score every `*_depth.pfm` in `gt_dir` against the same-named file in
    `pred_dir`; writes per-image rows plus an aggregate row."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    gt_files = sorted(gt_dir.glob("*_depth.pfm"))
    if not gt_files:
        raise UsageError(f"no *_depth.pfm files in {gt_dir}")

    rows, reports = [], []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise UsageError(f"missing prediction {pred_path}")
        report = evaluate_pair(read_prediction(pred_path), read_depth(gt_path))
        reports.append(report)
        rows.append(report.row(gt_path.name.removesuffix("_depth.pfm")))
    total = aggregate(reports)
    rows.append(total.row(AGGREGATE_ROW))

    with atomic_write(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)
    logger.info(
        "evaluated {} images: AbsRel={:.4f} delta1={:.4f}", len(reports), total.absrel, total.delta1
    )
    return total
