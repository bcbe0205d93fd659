"""Class-weighted cross-entropy + Dice composite loss and median-frequency weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

WEIGHT_EPS = 1e-6


@dataclass
class LossConfig:
    ce_weight: float = 0.5
    dice_weight: float = 1.5
    dice_eps: float = 1.0
    weight_eps: float = WEIGHT_EPS
    class_weights: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.dice_eps <= 0 or self.weight_eps <= 0:
            raise ValueError("loss epsilons must be positive")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")


def median_freq_weights(freqs: Sequence[float], eps: float = WEIGHT_EPS) -> np.ndarray:
    """``w_n = median{f_k : f_k > 0} / (f_n + eps)``, background included."""
    f = np.asarray(freqs, dtype=np.float64)
    pos = f[f > 0]
    if pos.size == 0:
        raise ValueError("all class frequencies are zero")
    return np.median(pos) / (f + eps)


def class_frequencies(masks: Sequence[np.ndarray], num_labels: int) -> np.ndarray:
    """Pixel frequency of each label ``0..num_labels-1`` over a collection of masks."""
    counts = np.zeros(num_labels, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m, dtype=np.int64).ravel(), minlength=num_labels)[:num_labels]
    total = counts.sum()
    if total == 0:
        raise ValueError("no pixels to count")
    return counts / total


def _check_labels(labels: torch.Tensor, num_labels: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_labels):
        raise ValueError(
            f"label index out of range [0, {num_labels}): found {int(labels.min())}..{int(labels.max())}"
        )


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor,
                weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over pixels of ``-w[y] * log softmax(z)[y]``.

    Unlike ``F.cross_entropy(weight=...)`` the sum is divided by the pixel
    count, not by the summed weights.

    Args:
        logits: ``(B, N+1, H, W)`` raw scores.
        labels: ``(B, H, W)`` integer class indices.
        weights: optional ``(N+1,)`` class weights.
    """
    _check_labels(labels, logits.shape[1])
    logp = F.log_softmax(logits, dim=1).gather(1, labels.long().unsqueeze(1)).squeeze(1)
    if weights is not None:
        logp = logp * weights.to(logits.dtype)[labels.long()]
    return -logp.mean()


def dice_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """``1 - mean_n Dice_n`` per image (all classes, background included), averaged over the batch."""
    n = probs.shape[1]
    _check_labels(labels, n)
    y = F.one_hot(labels.long(), n).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * y).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + y.sum(dim=(2, 3))
    dice = (2 * inter + eps) / (denom + eps)
    return (1 - dice.mean(dim=1)).mean()


def total_loss(logits: torch.Tensor, labels: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    weights = None
    if cfg.class_weights is not None:
        weights = torch.as_tensor(cfg.class_weights, dtype=logits.dtype, device=logits.device)
    ce = weighted_ce(logits, labels, weights)
    dice = dice_loss(logits.softmax(dim=1), labels, cfg.dice_eps)
    return cfg.ce_weight * ce + cfg.dice_weight * dice
