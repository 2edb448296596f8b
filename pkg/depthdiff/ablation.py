"""Component ablations on synthetic long-tail scenes.

Every variant of a suite is trained and evaluated on the same seeds and the
same data; a variant differs from the base config only by its overrides."""

import csv
import statistics
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from loguru import logger
from omegaconf import OmegaConf

from depthdiff.data import scene_spec
from depthdiff.errors import AlignmentError, DegenerateDepthError, UsageError
from depthdiff.evaluate import BAND_NAMES, aggregate, evaluate_pair
from depthdiff.model import LFM_PLACEMENTS
from depthdiff.synthdata import Sample, generate
from depthdiff.train import fit
from depthdiff.utils import atomic_write, stream_seed

# Steps over which loss stability and weight dilution are measured
STABILITY_WINDOW = 500
SMOOTHING = 50
EVAL_DATA_COUNTER = 1

Variant = Tuple[str, Dict[str, object]]

SUITES: Dict[str, List[Variant]] = {
    "biasmap": [
        ("baseline", {"train.biasmap_on": False, "train.var_loss_on": False}),
        ("+w_dist", {"train.w_struct_on": False, "train.var_loss_on": False}),
        ("+w_struct", {"train.var_loss_on": False}),
        ("+var", {}),
    ],
    "pooling": [
        (f"{d}/{s}", {"train.dist_pool": d, "train.struct_pool": s})
        for d in ("avg", "max")
        for s in ("avg", "max")
    ],
    "gamma": [(f"gamma={g}", {"train.gamma": float(g)}) for g in (1, 5, 20)],
    "placement": [(p, {"unet.lfm_placement": p}) for p in LFM_PLACEMENTS],
    "filters": [("none", {"train.lfm_on": False})]
    + [(f"N={n}", {"unet.n_masks": n}) for n in (1, 2, 4, 8)],
    "router": [
        ("none", {"train.lfm_on": False}),
        ("fixed-mask", {"unet.lfm_learnable_masks": False}),
    ]
    + [(v, {"unet.router_variant": v}) for v in ("PM", "LE+PM", "LE+LKC+PM", "LE+SA+PM")],
    "overall": [
        ("baseline", {"train.lfm_on": False, "train.biasmap_on": False}),
        ("+lfm", {"train.biasmap_on": False}),
        ("+biasmap", {"train.lfm_on": False}),
        ("+lfm+biasmap", {}),
    ],
}
# Loss-curve suites skip the (slow) evaluation pass
LOSS_ONLY_SUITES = ("gamma",)

ROW_COLUMNS = (
    ["suite", "variant", "seed", "status", "absrel", "delta1"]
    + [f"delta1_{b}" for b in BAND_NAMES]
    + ["final_loss", "loss_var", "w_deviation", "lfm_params"]
)
CURVE_COLUMNS = ("step", "L_latent", "L_var", "L_total", "mean_eta", "w_mean", "w_dev")


def variant_config(config, seed: int, overrides: Dict[str, object]):
    dotlist = [f"seed={seed}"] + [f"{k}={v}" for k, v in overrides.items()]
    return OmegaConf.merge(config, OmegaConf.from_dotlist(dotlist))


def seed_data(config, seed: int) -> Tuple[List[Sample], List[Sample]]:
    """Training and evaluation scenes for one seed, shared by every variant."""
    spec = scene_spec(config, seed)
    train = generate(spec, config.train.n_samples)
    eval_spec = replace(spec, seed=stream_seed(spec.seed, "data", EVAL_DATA_COUNTER))
    return train, generate(eval_spec, config.eval.n_samples)


def loss_statistics(history: Sequence[dict]) -> Dict[str, float]:
    """Smoothed final loss, loss variance and mean |w_final - 1| over the
    stability window."""
    window = history[:STABILITY_WINDOW]
    losses = [row["L_total"] for row in window]
    tail = [row["L_total"] for row in history[-SMOOTHING:]]
    return {
        "final_loss": statistics.fmean(tail),
        "loss_var": statistics.pvariance(losses) if len(losses) > 1 else 0.0,
        "w_deviation": statistics.fmean(row["w_dev"] for row in window),
    }


def evaluate_module(module, samples: Sequence[Sample], runs: int, seed: int):
    reports = []
    for sample in samples:
        pred = module.predict_depth(sample.image, runs=runs, seed=seed)
        try:
            reports.append(evaluate_pair(pred, sample.depth))
        except (DegenerateDepthError, AlignmentError) as e:
            logger.warning("skipping evaluation scene {}: {}", sample.seed, e)
    return aggregate(reports)


def write_curve(path: Path, history: Sequence[dict]):
    with atomic_write(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_COLUMNS)
        for row in history:
            writer.writerow([row[c] for c in CURVE_COLUMNS])


def run_variant(suite, name, overrides, config, seed, train, evaluation, out_dir) -> dict:
    cfg = variant_config(config, seed, overrides)
    module, history = fit(cfg, samples=train)
    row = {"suite": suite, "variant": name, "seed": seed, "status": "ok"}
    row.update(loss_statistics(history))
    row["lfm_params"] = module.lfm_parameter_count()
    if suite in LOSS_ONLY_SUITES:
        safe = name.replace("=", "")
        write_curve(out_dir / "curves" / f"{suite}_{safe}_seed{seed}.csv", history)
    else:
        report = evaluate_module(module, evaluation, cfg.schedule.ensemble_runs, seed)
        row.update(absrel=report.absrel, delta1=report.delta1)
        for band, value in zip(BAND_NAMES, report.band_delta1):
            row[f"delta1_{band}"] = value
    return row


def summarize_rows(rows: Sequence[dict]) -> str:
    """Seed-averaged metrics per variant as a plain-text table."""
    metrics = ROW_COLUMNS[4:]
    lines = ["variant".ljust(16) + "".join(m.rjust(14) for m in metrics)]
    for variant in dict.fromkeys(r["variant"] for r in rows):
        ok = [r for r in rows if r["variant"] == variant and r["status"] == "ok"]
        cells = []
        for m in metrics:
            values = [r[m] for r in ok if r.get(m) is not None]
            cells.append(f"{statistics.fmean(values):14.5f}" if values else " " * 13 + "-")
        n_failed = sum(1 for r in rows if r["variant"] == variant and r["status"] != "ok")
        note = f"  ({n_failed} failed)" if n_failed else ""
        lines.append(variant.ljust(16) + "".join(cells) + note)
    return "\n".join(lines) + "\n"


def run_ablation(
    config,
    suite: str,
    seeds: Sequence[int],
    out_dir: Union[str, Path],
    variants: Optional[List[Variant]] = None,
) -> Tuple[List[dict], int]:
    """Train and score every variant of `suite` for every seed.

    Writes `<suite>.csv` (one row per variant and seed) and
    `<suite>_summary.txt`. Returns the rows and the number of failed runs."""
    if variants is None:
        if suite not in SUITES:
            raise UsageError(f"unknown ablation suite {suite!r}, expected one of {sorted(SUITES)}")
        variants = SUITES[suite]
    if not seeds:
        raise UsageError("need at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows, n_failed = [], 0
    for seed in seeds:
        train, evaluation = seed_data(config, seed)
        for name, overrides in variants:
            logger.info("ablation {} / {} / seed {}", suite, name, seed)
            try:
                row = run_variant(suite, name, overrides, config, seed, train, evaluation, out_dir)
            except Exception:
                logger.exception("ablation run {} / {} / seed {} failed", suite, name, seed)
                row = {"suite": suite, "variant": name, "seed": seed, "status": "failed"}
                n_failed += 1
            rows.append(row)

    with atomic_write(out_dir / f"{suite}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ROW_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row[c] for c in ROW_COLUMNS])
    with atomic_write(out_dir / f"{suite}_summary.txt") as f:
        f.write(summarize_rows(rows))
    logger.info("ablation {} finished: {} runs, {} failed", suite, len(rows), n_failed)
    return rows, n_failed
