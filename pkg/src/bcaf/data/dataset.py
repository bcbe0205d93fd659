"""Torch dataset over in-memory sample pairs with per-sample RNG streams."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .sample import SamplePair, read_split
from .transforms import AugmentConfig, NormStats, normalize, paired_augment, shift_hsi

DATA_ROOT_ENV = "BCAF_DATA_ROOT"


def default_data_root(override=None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise ValueError(f"no data root given: pass --data-root or set {DATA_ROOT_ENV}")
    return Path(env)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Stream for one sample in one epoch; independent of worker count and order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


class PairDataset(Dataset):
    """Yields ``{"rgb", "hsi", "mask", "index"}`` tensors (channels-last images).

    With ``augment`` set, each item is augmented with the stream
    ``sample_rng(seed, epoch, index)``. ``shift`` displaces the raw HSI before
    normalisation (misalignment evaluation).
    """

    def __init__(self, samples: Sequence[SamplePair], stats: NormStats,
                 augment: Optional[AugmentConfig] = None, seed: int = 0, shift: tuple = (0, 0)):
        self.samples = list(samples)
        self.stats, self.augment, self.seed = stats, augment, seed
        self.shift = tuple(shift)
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def __len__(self) -> int:
        return len(self.samples)

    def prepare(self, index: int) -> SamplePair:
        s = self.samples[index]
        if self.augment is not None:
            s = paired_augment(s, sample_rng(self.seed, self.epoch, index), self.augment)
        if self.shift != (0, 0):
            s = shift_hsi(s, *self.shift)
        return normalize(s, self.stats)

    def __getitem__(self, index: int) -> dict:
        s = self.prepare(index)
        return {
            "rgb": torch.from_numpy(s.rgb),
            "hsi": torch.from_numpy(s.hsi),
            "mask": torch.from_numpy(s.mask.astype(np.int64)),
            "index": index,
        }


def make_loader(ds: PairDataset, batch_size: int, shuffle: bool, epoch: int = 0,
                num_workers: int = 0) -> DataLoader:
    """Loader whose order depends only on ``(ds.seed, epoch)``."""
    ds.set_epoch(epoch)
    gen = torch.Generator().manual_seed(int(ds.seed) * 100_003 + int(epoch))
    return DataLoader(ds, batch_size=batch_size, shuffle=shuffle, generator=gen if shuffle else None,
                      num_workers=num_workers, drop_last=False)


def load_splits(root, splits: Sequence[str] = ("train", "val", "test")) -> dict[str, list[SamplePair]]:
    root = Path(root)
    return {s: read_split(root, s) for s in splits if (root / s).exists()}
