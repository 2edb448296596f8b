from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pytorch_lightning as L
import torch
from loguru import logger
from torch.utils.data import DataLoader

from depthdiff.errors import DegenerateDepthError, EmptyInputError, UsageError
from depthdiff.fileio import MANIFEST_NAME, read_dataset
from depthdiff.normalize import normalize, percentiles
from depthdiff.synthdata import Sample, SceneSpec, generate
from depthdiff.utils import generator_for, stream_seed


def scene_spec(config, seed: Optional[int] = None) -> SceneSpec:
    """Scene parameters from the `scene` config section. Without an explicit
    scene seed the data is derived from the run seed."""
    fields = dict(config.scene)
    scene_seed = fields.pop("seed")
    if scene_seed is None:
        scene_seed = stream_seed(config.seed if seed is None else seed, "data")
    return SceneSpec(**fields, seed=int(scene_seed))


def stack_samples(samples: Sequence[Sample]) -> Dict[str, torch.Tensor]:
    """Stack images with their percentile-normalized depth and validity masks."""
    if not samples:
        raise EmptyInputError("no training samples")
    images, depths, valids = [], [], []
    for i, sample in enumerate(samples):
        try:
            stats = percentiles(sample.depth)
        except DegenerateDepthError as e:
            logger.warning("skipping sample {}: {}", i, e)
            continue
        d_norm = normalize(sample.depth, stats)
        images.append(sample.image)
        depths.append(d_norm.values)
        valids.append(d_norm.valid)
    if not images:
        raise EmptyInputError("every training sample has degenerate depth")
    return {
        "image": torch.stack(images).to(torch.float32),
        "depth": torch.stack(depths).to(torch.float32),
        "valid": torch.stack(valids),
    }


class StepBatchDataset(torch.utils.data.Dataset):
    """Item i is the whole batch of training step `start_step + i`.

    Batch membership is drawn from the run seed and the step number only, so
    a resumed run sees exactly the batches an uninterrupted run would."""

    def __init__(
        self,
        tensors: Dict[str, torch.Tensor],
        batch_size: int,
        seed: int,
        total_steps: int,
        start_step: int = 0,
    ):
        self.tensors = tensors
        self.batch_size = batch_size
        self.seed = seed
        self.total_steps = total_steps
        self.start_step = start_step
        self.n = tensors["image"].shape[0]

    def __len__(self):
        return max(self.total_steps - self.start_step, 0)

    def indices(self, step: int) -> torch.Tensor:
        g = generator_for(self.seed, "order", step)
        if self.batch_size <= self.n:
            return torch.randperm(self.n, generator=g)[: self.batch_size]
        return torch.randint(0, self.n, (self.batch_size,), generator=g)

    def __getitem__(self, i):
        step = self.start_step + i
        idx = self.indices(step)
        batch = {k: v[idx] for k, v in self.tensors.items()}
        batch["step"] = torch.tensor(step)
        return batch


class SyntheticDepthDataModule(L.LightningDataModule):
    """Training data: an on-disk dataset written by `gen`, explicit samples, or
    scenes generated from the config when neither is given."""

    def __init__(
        self,
        config,
        samples: Optional[List[Sample]] = None,
        data_dir: Optional[str] = None,
        start_step: int = 0,
    ):
        super().__init__()
        self.config = config
        self.samples = samples
        self.data_dir = data_dir
        self.start_step = start_step

    def prepare_data(self):
        if self.samples is not None:
            return
        if self.data_dir is not None:
            path = Path(self.data_dir)
            manifest = path / MANIFEST_NAME if path.is_dir() else path
            if not manifest.exists():
                raise UsageError(f"no dataset manifest at {manifest}")
            logger.info("reading dataset from {}", manifest)
            self.samples = read_dataset(manifest)
        else:
            n = self.config.train.n_samples
            logger.info("generating {} synthetic scenes", n)
            self.samples = generate(scene_spec(self.config), n)

    def setup(self, stage=None):
        if stage not in (None, "fit"):
            logger.info("skipping setup for stage: {} (nothing to do)", stage)
            return
        self.tensors = stack_samples(self.samples)
        size = tuple(self.tensors["image"].shape[-2:])
        expected = self.config.scene.image_size
        if size != (expected, expected):
            raise UsageError(f"dataset images are {size}, the model is configured for {expected}x{expected}")
        self.X_trn = StepBatchDataset(
            self.tensors,
            self.config.train.batch_size,
            self.config.seed,
            self.config.train.steps,
            self.start_step,
        )

    def train_dataloader(self):
        # items are already batches
        return DataLoader(self.X_trn, batch_size=None, shuffle=False, num_workers=0)
