"""Training hyper-parameters, warm-up + polynomial LR schedule and AdamW parameter groups."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch.nn as nn

TAG_LR_FIELDS = {
    "head": "lr_head",
    "backbone_pretrained": "lr_backbone_pretrained",
    "backbone_random": "lr_backbone_random",
}
_NORM_TYPES = (nn.LayerNorm, nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm)


@dataclass(frozen=True)
class TrainConfig:
    lr_head: float = 1e-4
    lr_backbone_pretrained: float = 1e-5
    lr_backbone_random: float = 1e-4
    lr_scale: float = 1.0            # global multiplier for desk-scale runs
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    poly_power: float = 0.9
    micro_batch: int = 2
    accum_steps: int = 4
    epochs: int = 200
    seed: int = 0
    grad_clip: Optional[float] = None
    mixed_precision: bool = False
    median_freq_weights: bool = True
    augment: bool = True
    freeze: bool = False
    eval_every: int = 1

    def __post_init__(self):
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ValueError("micro_batch and accum_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} must be in [0, epochs={self.epochs})")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps

    def lr_for(self, tag: str) -> float:
        return getattr(self, TAG_LR_FIELDS[tag]) * self.lr_scale

    def steps_per_epoch(self, n_samples: int) -> int:
        return max(1, math.ceil(n_samples / self.effective_batch))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(step: int, total_steps: int, warmup_steps: int = 0, power: float = 0.9) -> float:
    """Multiplier: linear ``0 -> 1`` over the warm-up, then ``(1 - t) ** power``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must lie in [0, {total_steps})")
    if step < warmup_steps:
        return step / warmup_steps
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return (1.0 - t) ** power


def no_decay_names(model: nn.Module) -> set[str]:
    """Biases and normalisation-layer parameters."""
    out = set()
    for mname, mod in model.named_modules():
        for pname, _ in mod.named_parameters(recurse=False):
            full = f"{mname}.{pname}" if mname else pname
            if isinstance(mod, _NORM_TYPES) or pname == "bias":
                out.add(full)
    return out


def build_param_groups(model: nn.Module, tags: dict[str, Optional[str]], cfg: TrainConfig) -> list[dict]:
    """AdamW groups from provenance tags; groups with equal (lr, decay) are merged.

    Each group carries ``base_lr`` (before scheduling) and the member ``names``.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    untagged = [n for n, _ in named if tags.get(n) not in TAG_LR_FIELDS]
    if untagged:
        raise ValueError(f"untagged parameters: {untagged}")
    skip = no_decay_names(model)
    groups: dict[tuple, dict] = {}
    for n, p in named:
        lr = cfg.lr_for(tags[n])
        wd = 0.0 if n in skip else cfg.weight_decay
        g = groups.setdefault((lr, wd), {"params": [], "names": [], "tags": set(),
                                         "lr": lr, "base_lr": lr, "weight_decay": wd})
        g["params"].append(p)
        g["names"].append(n)
        g["tags"].add(tags[n])
    out = []
    for g in groups.values():
        g["tags"] = sorted(g["tags"])
        out.append(g)
    return out
