"""Shared U-Net-like decoder used by the RGB-only, HSI-only and fused models."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DecoderConfig:
    num_classes: int = 6
    widths: tuple = (256, 128, 64)
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ValueError("decoder needs exactly three widths (one per upsampling step)")
        if any(a <= b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"decoder widths must be strictly decreasing, got {self.widths}")
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")

    @property
    def out_channels(self) -> int:
        """Foreground classes plus background."""
        return self.num_classes + 1

    def stage_widths(self) -> tuple:
        """Adapter output width for stages 1..4."""
        w0, w1, w2 = self.widths
        return (w2, w1, w0, w0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ChannelAdapters(nn.Module):
    """Per-stage 1x1 convolutions mapping encoder widths to decoder widths.

    Takes channels-last maps and returns channels-first ones.
    """

    def __init__(self, stage_dims: Sequence[int], widths: Sequence[int]):
        super().__init__()
        self.convs = nn.ModuleList([nn.Conv2d(c, w, 1) for c, w in zip(stage_dims, widths)])

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != len(self.convs):
            raise ValueError(f"expected {len(self.convs)} stage maps, got {len(feats)}")
        return [conv(f.permute(0, 3, 1, 2)) for conv, f in zip(self.convs, feats)]


class UpBlock(nn.Module):
    """Stride-2 transpose conv, concat with the skip, two Conv-BN-ReLU, dropout."""

    def __init__(self, cin: int, cout: int, dropout: float):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.refine = nn.Sequential(conv_bn_relu(2 * cout, cout), conv_bn_relu(cout, cout))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"skip resolution {tuple(skip.shape[-2:])} != upsampled {tuple(x.shape[-2:])}")
        return self.drop(self.refine(torch.cat([x, skip], dim=1)))


class UNetDecoder(nn.Module):
    """Four stage maps (1/4 ... 1/32) -> logits at 1/4 resolution, channels-first ``(B, N+1, h, w)``."""

    def __init__(self, stage_dims: Sequence[int], cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        if len(stage_dims) != 4:
            raise ValueError("decoder expects four encoder stages")
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        self.adapters = ChannelAdapters(stage_dims, cfg.stage_widths())
        self.blocks = nn.ModuleList([UpBlock(w0, w0, cfg.dropout), UpBlock(w0, w1, cfg.dropout),
                                     UpBlock(w1, w2, cfg.dropout)])
        self.classifier = nn.Conv2d(w2, cfg.out_channels, 1)

    def decode(self, aligned: Sequence[torch.Tensor]) -> torch.Tensor:
        """Decode channel-aligned, channels-first maps."""
        x = aligned[3]
        for blk, skip in zip(self.blocks, (aligned[2], aligned[1], aligned[0])):
            x = blk(x, skip)
        return self.classifier(x)

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.decode(self.adapters(feats))


def resize_logits(logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of raw ``(B, C, h, w)`` logits with half-pixel centres."""
    size = (int(size[0]), int(size[1]))
    if tuple(logits.shape[-2:]) == size:
        return logits
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
