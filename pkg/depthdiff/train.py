from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import pytorch_lightning as L
from loguru import logger

from depthdiff.callbacks import PeriodicCheckpoint, TrainingLogWriter
from depthdiff.data import SyntheticDepthDataModule
from depthdiff.lightning_module import DepthDiffusionLightning
from depthdiff.synthdata import Sample
from depthdiff.utils import (
    check_for_repo_versioned_without_uncommited_changes,
    get_run_name,
    run_manager,
)

TRAIN_LOG = "train_log.csv"
CHECKPOINT_DIR = "checkpoints"


def build_trainer(
    config, callbacks: List[L.Callback], max_steps: int, progress_bar: bool = False
):
    return L.Trainer(
        max_steps=max_steps,
        max_epochs=-1,
        callbacks=callbacks,
        logger=False,
        enable_checkpointing=False,
        enable_progress_bar=progress_bar,
        enable_model_summary=False,
        num_sanity_val_steps=0,
        accelerator="cpu",
        devices=1,
        precision="32-true",
        deterministic=True,
        gradient_clip_val=config.train.grad_clip,
        gradient_clip_algorithm="norm",
    )


def summarize(module: DepthDiffusionLightning, config, dm: SyntheticDepthDataModule):
    n_params = sum(p.numel() for p in module.parameters())
    logger.info("model parameters: {:,}", n_params)
    logger.info(
        "LFM parameters: {:,} ({})",
        module.lfm_parameter_count(),
        module.model.lfm_placement,
    )
    tensors = dm.tensors
    logger.info(
        "training set: {} scenes of {}x{}, {} steps of batch {}",
        tensors["image"].shape[0],
        *tensors["image"].shape[-2:],
        config.train.steps,
        config.train.batch_size,
    )


def fit(
    config,
    samples: Optional[Sequence[Sample]] = None,
    data_dir: Optional[Union[str, Path]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    progress_bar: bool = False,
) -> Tuple[DepthDiffusionLightning, List[dict]]:
    """Train a denoiser; returns the module and the per-step loss history.

    With `out_dir`, the loss log and periodic checkpoints are written there.
    `resume_from` continues a checkpoint up to `config.train.steps`; the
    continued run reproduces the uninterrupted one exactly."""
    if resume_from is not None:
        module = DepthDiffusionLightning.from_checkpoint(resume_from)
        module.config.train.steps = config.train.steps
        config = module.config
    else:
        module = DepthDiffusionLightning(config)

    remaining = config.train.steps - module.start_step
    if remaining <= 0:
        logger.info("checkpoint is already at step {}, nothing to train", module.start_step)
        return module, []

    dm = SyntheticDepthDataModule(
        config,
        samples=list(samples) if samples is not None else None,
        data_dir=str(data_dir) if data_dir is not None else None,
        start_step=module.start_step,
    )
    dm.prepare_data()
    dm.setup("fit")
    summarize(module, config, dm)

    log_writer = TrainingLogWriter(
        Path(out_dir) / TRAIN_LOG if out_dir is not None else None,
        config.train.log_every,
        append=resume_from is not None,
    )
    callbacks: List[L.Callback] = [log_writer]
    if out_dir is not None:
        callbacks.append(
            PeriodicCheckpoint(Path(out_dir) / CHECKPOINT_DIR, config.train.checkpoint_every)
        )

    trainer = build_trainer(config, callbacks, remaining, progress_bar)
    trainer.fit(module, dm)
    return module, log_writer.history


def train(config, out_dir: Union[str, Path], data_dir=None, resume_from=None):
    """Command-line training run: logs to `out_dir/train.log`."""
    if config.require_clean_repo:
        check_for_repo_versioned_without_uncommited_changes()

    with run_manager(out_dir, get_run_name(resume_from)):
        module, history = fit(
            config,
            data_dir=data_dir,
            out_dir=out_dir,
            resume_from=resume_from,
            progress_bar=True,
        )
        if history:
            last = history[-1]
            logger.info("finished at step {}, L_total={:.5f}", last["step"] + 1, last["L_total"])
        return module, history
