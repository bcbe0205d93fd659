"""Confusion tallies, IoU / mIoU and the ground-truth oracle fusion bound."""

from __future__ import annotations

import warnings
from typing import Optional

import numpy as np


class ConfusionTally:
    """Accumulated ``num_labels x num_labels`` confusion matrix (rows = truth, cols = prediction).

    Label 0 is background. Tallies from independent workers combine with
    :meth:`merge` (associative and commutative).
    """

    def __init__(self, num_labels: int):
        if num_labels < 2:
            raise ValueError("need background plus at least one class")
        self.num_labels = num_labels
        self.matrix = np.zeros((num_labels, num_labels), dtype=np.int64)

    def update(self, pred, labels) -> "ConfusionTally":
        pred = np.asarray(pred, dtype=np.int64).ravel()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if pred.shape != labels.shape:
            raise ValueError(f"prediction/label size mismatch: {pred.size} vs {labels.size}")
        n = self.num_labels
        if labels.size and (labels.min() < 0 or labels.max() >= n or pred.min() < 0 or pred.max() >= n):
            raise ValueError(f"class index outside [0, {n})")
        self.matrix += np.bincount(labels * n + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        if other.num_labels != self.num_labels:
            raise ValueError("cannot merge tallies with different class counts")
        out = ConfusionTally(self.num_labels)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - self.tp

    @property
    def pixels(self) -> int:
        return int(self.matrix.sum())


def iou_report(tally: ConfusionTally, class_names: Optional[list[str]] = None) -> dict:
    """Per-class IoU and the foreground mIoU.

    Classes with ``TP + FP + FN == 0`` are reported as ``None`` and left out
    of the mean.
    """
    if tally.pixels == 0:
        raise ValueError("empty tally: nothing was accumulated")
    n = tally.num_labels
    names = class_names or [str(i) for i in range(n)]
    denom = tally.tp + tally.fp + tally.fn
    per_class, defined = {}, []
    for c in range(n):
        iou = float(tally.tp[c] / denom[c]) if denom[c] > 0 else None
        per_class[names[c]] = iou
        if c > 0 and iou is not None:
            defined.append(iou)
    skipped = [names[c] for c in range(1, n) if denom[c] == 0]
    if skipped:
        warnings.warn(f"IoU undefined (no prediction, no ground truth) for classes {skipped}; excluded from mIoU")
    miou = float(np.mean(defined)) if defined else float("nan")
    return {"per_class_iou": per_class, "miou": miou, "pixels": tally.pixels}


def miou(tally: ConfusionTally) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return iou_report(tally)["miou"]


def _foreground_miou(pred, labels, num_labels: int) -> float:
    m = miou(ConfusionTally(num_labels).update(pred, labels))
    return -1.0 if np.isnan(m) else m


def oracle_select(pred_rgb, pred_hsi, labels, num_labels: Optional[int] = None,
                  fallback: str = "stronger") -> np.ndarray:
    """Per-pixel best-of-modality prediction chosen with ground truth.

    A pixel takes whichever prediction is correct. Where both are wrong it
    keeps the ``fallback`` modality: ``"rgb"``, ``"hsi"``, or ``"stronger"``
    (the modality with the higher mIoU over the given pixels, RGB on ties).
    With ``"stronger"`` the result has mIoU >= both unimodal mIoUs.
    """
    pred_rgb, pred_hsi, labels = (np.asarray(a) for a in (pred_rgb, pred_hsi, labels))
    if not pred_rgb.shape == pred_hsi.shape == labels.shape:
        raise ValueError(
            f"grid mismatch: rgb {pred_rgb.shape}, hsi {pred_hsi.shape}, labels {labels.shape}"
        )
    if fallback == "stronger":
        if num_labels is None:
            raise ValueError("num_labels is required to rank the modalities")
        hsi_better = _foreground_miou(pred_hsi, labels, num_labels) > _foreground_miou(pred_rgb, labels, num_labels)
        fallback = "hsi" if hsi_better else "rgb"
    if fallback == "rgb":
        base, other = pred_rgb, pred_hsi
    elif fallback == "hsi":
        base, other = pred_hsi, pred_rgb
    else:
        raise ValueError(f"unknown fallback {fallback!r}")
    return np.where((base != labels) & (other == labels), other, base)


def oracle_fusion(pred_rgb, pred_hsi, labels, num_labels: int, fallback: str = "stronger") -> ConfusionTally:
    """Tally of :func:`oracle_select` over one evaluation split."""
    pick = oracle_select(pred_rgb, pred_hsi, labels, num_labels, fallback)
    return ConfusionTally(num_labels).update(pick, labels)
