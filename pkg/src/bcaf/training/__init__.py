"""Checkpoints, schedules and the training loop.

``protocols`` is imported lazily by callers; it depends on the model config layer.
"""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .schedule import TrainConfig, build_param_groups, lr_schedule
