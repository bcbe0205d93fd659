"""Synthetic data generation, sample I/O and paired transforms."""

from .dataset import DATA_ROOT_ENV, PairDataset, default_data_root, load_splits, make_loader, sample_rng
from .sample import SampleFormatError, SamplePair, read_sample, read_split, write_sample, write_split
from .synth import SynthSpec, synthesize_dataset, write_dataset
from .transforms import (
    AugmentConfig,
    NormStats,
    background_remask,
    compute_norm_stats,
    normalize,
    paired_augment,
    shift_hsi,
)
