import csv
import time
from pathlib import Path
from typing import List, Optional

import pytorch_lightning as L
from loguru import logger

LOG_COLUMNS = ("step", "L_latent", "L_var", "L_total", "mean_eta", "wall_time")


class TrainingLogWriter(L.Callback):
    """Record every step's losses; optionally stream them to a CSV file.

    Rows are kept in `history` (with the mean loss weight as well) so callers
    can inspect loss curves without re-reading the file."""

    def __init__(
        self, path: Optional[Path] = None, log_periodicity: int = 50, append: bool = False
    ):
        self.path = Path(path) if path is not None else None
        self.log_periodicity = log_periodicity
        self.append = append
        self.history: List[dict] = []
        self._file = None
        self._writer = None

    def on_train_start(self, trainer, pl_module):
        self._t0 = time.monotonic()
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        resume = self.append and self.path.exists()
        self._file = open(self.path, "a" if resume else "w", newline="")
        self._writer = csv.writer(self._file)
        if not resume:
            self._writer.writerow(LOG_COLUMNS)

    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx):
        step = int(batch["step"])
        report = outputs["report"]
        row = {
            "step": step,
            **report,
            "mean_eta": outputs["mean_eta"],
            "wall_time": time.monotonic() - self._t0,
            "w_mean": outputs["w_mean"],
            "w_dev": outputs["w_dev"],
        }
        self.history.append(row)
        if self._writer is not None:
            self._writer.writerow([row[c] for c in LOG_COLUMNS])
            self._file.flush()
        if step % self.log_periodicity == 0:
            logger.info(
                "step {}: L_total={:.5f} L_latent={:.5f} L_var={:.5f} eta={:.3f}",
                step,
                report["L_total"],
                report["L_latent"],
                report["L_var"],
                outputs["mean_eta"],
            )

    def on_train_end(self, trainer, pl_module):
        if self._file is not None:
            self._file.close()
            self._file = self._writer = None


class PeriodicCheckpoint(L.Callback):
    """Save weights, optimizer moments and the step counter every N steps and
    at the end of training (`last`)."""

    def __init__(self, dirpath: Path, every_n_steps: int):
        self.dirpath = Path(dirpath)
        self.every_n_steps = every_n_steps
        self.completed = None

    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx):
        self.completed = int(batch["step"]) + 1
        if self.every_n_steps and self.completed % self.every_n_steps == 0:
            pl_module.save_checkpoint(
                self.dirpath / f"step-{self.completed:06d}",
                self.completed,
                trainer.optimizers[0],
            )

    def on_train_end(self, trainer, pl_module):
        if self.completed is not None:
            pl_module.save_checkpoint(self.dirpath / "last", self.completed, trainer.optimizers[0])
