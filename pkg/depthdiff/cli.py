"""Command-line entry point.

    depthdiff gen     --out DIR [--count N] [--spec scene.yaml]
    depthdiff train   --out DIR [--data DIR] [--steps N] [--resume CKPT]
    depthdiff infer   --checkpoint CKPT --image PFM|MANIFEST --out DIR [--runs N] [--seed S]
    depthdiff eval    --pred-dir DIR --gt-dir DIR --out CSV
    depthdiff ablate  --suite NAME --seeds 1,2,3 --out DIR

Every command takes `--config FILE` and trailing `key=value` overrides
(`unet=tiny`, `train.lr=1e-4`). Precedence: packaged defaults, then the
file, then the overrides. The resolved config and the invocation are
written next to the outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error."""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from hydra.errors import HydraException
from loguru import logger
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from depthdiff import VERSION
from depthdiff.ablation import SUITES, run_ablation
from depthdiff.checkpoint import load_config as load_checkpoint_config
from depthdiff.config import load_config, restore_config, validate
from depthdiff.data import scene_spec
from depthdiff.errors import DepthDiffError, UsageError
from depthdiff.evaluate import evaluate_dirs
from depthdiff.fileio import write_dataset
from depthdiff.inference import infer
from depthdiff.synthdata import generate
from depthdiff.train import train
from depthdiff.utils import atomic_write, source_revision

RESOLVED_CONFIG = "resolved_config.yaml"
INVOCATION = "invocation.yaml"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="depthdiff", description="Latent diffusion depth estimation")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML file layered over the packaged defaults")
        p.add_argument("--seed", type=int, help="run seed (overrides seed=...)")
        p.add_argument("overrides", nargs="*", help="key=value config overrides")
        return p

    p = command("gen", "write a synthetic dataset and manifest")
    p.add_argument("--spec", help="YAML file with scene parameters")
    p.add_argument("--count", type=int, help="number of scenes (default train.n_samples)")
    p.add_argument("--image-format", choices=("pfm", "pgm"), default="pfm")
    p.add_argument("--out", required=True)

    p = command("train", "train a denoiser")
    p.add_argument("--data", help="dataset directory or manifest (default: generate scenes)")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", required=True)

    p = command("infer", "ensemble depth inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image PFM, manifest or dataset directory")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True)

    p = command("eval", "align predictions and write metrics")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")

    p = command("ablate", "train and compare the variants of an ablation suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    p.add_argument("--out", required=True)
    return parser


def resolve(args) -> DictConfig:
    overrides = list(args.overrides)
    layers = []
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"train.steps={args.steps}")
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"no config file at {args.config}")
    if getattr(args, "spec", None) is not None:
        if not Path(args.spec).is_file():
            raise UsageError(f"no scene spec at {args.spec}")
        layers.append({"scene": OmegaConf.load(args.spec)})
    cfg = load_config(args.config, overrides, layers)
    validate(cfg)
    return cfg


def write_run_record(out_dir: Path, cfg, args, prefix: str = ""):
    """Resolved config plus the exact invocation, so the run can be repeated."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with atomic_write(out_dir / f"{prefix}{RESOLVED_CONFIG}") as f:
        f.write(OmegaConf.to_yaml(cfg, resolve=True))
    invocation = {
        "command": args.command,
        "arguments": {k: v for k, v in vars(args).items() if k != "command"},
        "version": VERSION,
        "revision": source_revision(),
    }
    with atomic_write(out_dir / f"{prefix}{INVOCATION}") as f:
        f.write(OmegaConf.to_yaml(OmegaConf.create(invocation)))


def require_path(path: Optional[str], what: str):
    if path is not None and not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")


def run_gen(args, cfg) -> int:
    out = Path(args.out)
    write_run_record(out, cfg, args)
    count = args.count if args.count is not None else cfg.train.n_samples
    write_dataset(generate(scene_spec(cfg), count), out, args.image_format)
    return EXIT_OK


def run_train(args, cfg) -> int:
    require_path(args.data, "dataset")
    require_path(args.resume, "checkpoint")
    out = Path(args.out)
    write_run_record(out, cfg, args)
    train(cfg, out, data_dir=args.data, resume_from=args.resume)
    return EXIT_OK


def run_infer(args, cfg) -> int:
    require_path(args.checkpoint, "checkpoint")
    require_path(args.image, "image")
    out = Path(args.out)
    # the model configuration lives in the checkpoint
    model_cfg = restore_config(load_checkpoint_config(args.checkpoint))
    model_cfg.seed = cfg.seed
    write_run_record(out, model_cfg, args)
    infer(args.checkpoint, args.image, out, runs=args.runs, seed=cfg.seed)
    return EXIT_OK


def run_eval(args, cfg) -> int:
    require_path(args.pred_dir, "prediction directory")
    require_path(args.gt_dir, "ground truth directory")
    out = Path(args.out)
    write_run_record(out.parent, cfg, args, prefix=f"{out.stem}_")
    evaluate_dirs(args.pred_dir, args.gt_dir, out)
    return EXIT_OK


def run_ablate(args, cfg) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {args.seeds!r}")
    out = Path(args.out)
    write_run_record(out, cfg, args)
    _, n_failed = run_ablation(cfg, args.suite, seeds, out)
    return EXIT_FAILURE if n_failed else EXIT_OK


COMMANDS = {
    "gen": run_gen,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "ablate": run_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
    except (UsageError, OmegaConfBaseException, HydraException) as e:
        logger.error("usage error: {}", e)
        return EXIT_USAGE
    except DepthDiffError as e:
        logger.error("invalid configuration: {}", e)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        logger.error("usage error: {}", e)
        return EXIT_USAGE
    except Exception:
        logger.exception("{} failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
