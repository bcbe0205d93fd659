"""Training loop with gradient accumulation, best-val model selection and JSON-lines logs."""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..data.dataset import PairDataset, make_loader
from ..losses import LossConfig, class_frequencies, median_freq_weights, total_loss
from ..metrics import ConfusionTally, iou_report, miou
from .checkpoint import Checkpoint, capture_rng, state_tensors
from .schedule import TrainConfig, build_param_groups, lr_schedule


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics)}")
        self.diagnostics = diagnostics


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _inputs(batch: dict, device) -> tuple:
    return batch["rgb"].to(device), batch["hsi"].to(device), batch["mask"].to(device)


def batch_loss(model: nn.Module, batch: dict, loss_cfg: LossConfig, device="cpu") -> torch.Tensor:
    rgb, hsi, mask = _inputs(batch, device)
    logits = model.logits_at(rgb, hsi, mask.shape[-2:])
    return total_loss(logits, mask, loss_cfg)


def accumulate(model: nn.Module, micro_batches: Sequence[dict], loss_cfg: LossConfig, device="cpu") -> float:
    """Back-propagate the window-mean loss over ``micro_batches``; returns that loss.

    Each micro-batch loss is weighted by its share of the window's samples, so
    the summed gradient equals the gradient of one batch holding all of them.
    """
    n = sum(len(b["mask"]) for b in micro_batches)
    total = 0.0
    for b in micro_batches:
        loss = batch_loss(model, b, loss_cfg, device) * (len(b["mask"]) / n)
        loss.backward()
        total += float(loss.detach())
    return total


def grad_norms(groups: Iterable[dict]) -> dict:
    out = {}
    for i, g in enumerate(groups):
        sq = sum(float(p.grad.detach().pow(2).sum()) for p in g["params"] if p.grad is not None)
        out[f"group{i}:{'+'.join(g['tags'])}"] = math.sqrt(sq)
    return out


@torch.no_grad()
def evaluate(model: nn.Module, ds: PairDataset, batch_size: int = 4, device="cpu",
             num_labels: Optional[int] = None) -> ConfusionTally:
    """Confusion tally of argmax predictions on the label grid."""
    was_training = model.training
    model.eval()
    tally = None
    for batch in make_loader(ds, batch_size, shuffle=False):
        rgb, hsi, mask = _inputs(batch, device)
        logits = model.logits_at(rgb, hsi, mask.shape[-2:])
        if tally is None:
            tally = ConfusionTally(num_labels or logits.shape[1])
        tally.update(logits.argmax(1).cpu().numpy(), mask.cpu().numpy())
    model.train(was_training)
    return tally


@torch.no_grad()
def predict(model: nn.Module, ds: PairDataset, batch_size: int = 4, device="cpu") -> tuple[np.ndarray, np.ndarray]:
    """Stacked argmax predictions and labels for a whole split."""
    model.eval()
    preds, labels = [], []
    for batch in make_loader(ds, batch_size, shuffle=False):
        rgb, hsi, mask = _inputs(batch, device)
        preds.append(model.logits_at(rgb, hsi, mask.shape[-2:]).argmax(1).cpu().numpy())
        labels.append(mask.cpu().numpy())
    return np.concatenate(preds), np.concatenate(labels)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)
    best_miou: float = float("nan")
    best_epoch: int = -1


def class_weights_for(ds: PairDataset, num_labels: int) -> list[float]:
    freqs = class_frequencies([s.mask for s in ds.samples], num_labels)
    return median_freq_weights(freqs).tolist()


def train_phase(model: nn.Module, train_ds: PairDataset, val_ds: Optional[PairDataset], cfg: TrainConfig,
                loss_cfg: Optional[LossConfig] = None, device="cpu", log: Optional[Callable[[dict], None]] = None,
                meta: Optional[dict] = None, tags: Optional[dict] = None) -> TrainResult:
    """Train ``model`` for ``cfg.epochs`` epochs; keep the best-validation state.

    The optimiser steps once per ``accum_steps`` micro-batches of
    ``micro_batch`` samples. Per-epoch records ``{"epoch", "loss", "lr",
    "miou"}`` go to ``log``.
    """
    seed_everything(cfg.seed)
    model.to(device)
    num_labels = model.decoder.cfg.out_channels
    if loss_cfg is None:
        weights = class_weights_for(train_ds, num_labels) if cfg.median_freq_weights else None
        loss_cfg = LossConfig(class_weights=weights)
    if cfg.freeze:
        for p in model.parameters():
            p.requires_grad_(False)
    tags = tags if tags is not None else model.param_tags()
    groups = build_param_groups(model, tags, cfg) if not cfg.freeze else []
    opt = torch.optim.AdamW(groups, betas=(0.9, 0.999)) if groups else None
    steps_per_epoch = cfg.steps_per_epoch(len(train_ds))
    total_steps = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    meta = dict(meta or {})
    meta["loss"] = {"class_weights": loss_cfg.class_weights}

    history, step = [], 0
    best_miou, best_epoch, best_state = -math.inf, -1, None
    last_lr = 0.0
    for epoch in range(cfg.epochs):
        model.train(not cfg.freeze)
        t0 = time.perf_counter()
        losses, window = [], []
        batches = list(make_loader(train_ds, cfg.micro_batch, shuffle=True, epoch=epoch))
        for i, b in enumerate(batches):
            window.append(b)
            if len(window) < cfg.accum_steps and i < len(batches) - 1:
                continue
            if opt is None:
                with torch.no_grad():
                    loss = sum(float(batch_loss(model, w, loss_cfg, device)) * len(w["mask"]) for w in window)
                    loss /= sum(len(w["mask"]) for w in window)
            else:
                loss = accumulate(model, window, loss_cfg, device)
            if not math.isfinite(loss):
                diag = {"epoch": epoch, "step": step, "last_lr": last_lr,
                        "grad_norms": grad_norms(groups) if opt else {}}
                raise TrainingDiverged("non-finite loss", diag)
            if opt is not None:
                mult = lr_schedule(min(step + 1, total_steps), total_steps, warmup, cfg.poly_power)
                for g in opt.param_groups:
                    g["lr"] = g["base_lr"] * mult
                last_lr = max(g["lr"] for g in opt.param_groups)
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                opt.zero_grad(set_to_none=True)
            losses.append(loss * sum(len(w["mask"]) for w in window))
            step += 1
            window = []
        record = {"epoch": epoch, "loss": float(sum(losses) / len(train_ds)), "lr": last_lr,
                  "seconds": time.perf_counter() - t0}
        if val_ds is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            record["miou"] = miou(evaluate(model, val_ds, device=device, num_labels=num_labels))
            if record["miou"] > best_miou:
                best_miou, best_epoch, best_state = record["miou"], epoch, state_tensors(model)
        history.append(record)
        if log:
            log(record)

    last_state = state_tensors(model)
    if best_state is None:
        best_state, best_epoch = last_state, cfg.epochs - 1
    base_meta = {**meta, "history": history, "train": cfg.to_json()}
    last = Checkpoint(last_state, {**base_meta, "epoch": cfg.epochs - 1, "val_miou": history[-1].get("miou")},
                      optimizer=opt.state_dict() if opt else None, rng=capture_rng())
    best = Checkpoint(best_state, {**base_meta, "epoch": best_epoch,
                                   "val_miou": None if best_miou == -math.inf else best_miou})
    return TrainResult(best, last, history, best_miou, best_epoch)
