"""Two-phase protocol: unimodal training, then fusion fine-tuning from the unimodal
checkpoints; plus the logit-fusion baseline."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Callable, Optional, Union

import torch

from ..config import RunConfig, build_model, model_from_meta, model_meta
from ..data.dataset import PairDataset
from ..data.sample import SamplePair
from ..data.transforms import AugmentConfig, NormStats, compute_norm_stats
from ..metrics import iou_report
from ..models import BCAFModel, LogitFusionModel
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .schedule import TrainConfig
from .trainer import TrainResult, evaluate, train_phase

CkptLike = Union[Checkpoint, str, os.PathLike]


def _ckpt(c: CkptLike) -> Checkpoint:
    return c if isinstance(c, Checkpoint) else load_checkpoint(c)


def make_datasets(splits: dict[str, list[SamplePair]], train_cfg: TrainConfig,
                  stats: Optional[NormStats] = None, augment: Optional[AugmentConfig] = None):
    """Train / val datasets; normalisation statistics come from the training split only."""
    stats = stats or compute_norm_stats(splits["train"])
    aug = (augment or AugmentConfig()) if train_cfg.augment else None
    train = PairDataset(splits["train"], stats, aug, seed=train_cfg.seed)
    val = PairDataset(splits["val"], stats) if splits.get("val") else None
    return train, val, stats


def restore_model(ckpt: CkptLike):
    """Rebuild a model from a checkpoint's metadata and load its tensors."""
    ck = _ckpt(ckpt)
    model = model_from_meta(ck.meta)
    model.load_state_dict(ck.tensors)
    return model, ck


def init_fusion(model: BCAFModel, rgb_ckpt: CkptLike, hsi_ckpt: CkptLike) -> dict:
    rc, hc = _ckpt(rgb_ckpt), _ckpt(hsi_ckpt)
    if rc.meta.get("num_classes") != hc.meta.get("num_classes"):
        raise ValueError("class-count mismatch between unimodal checkpoints")
    return model.init_from_unimodal(rc.tensors, hc.tensors)


def logit_fusion_model(rgb_ckpt: CkptLike, hsi_ckpt: CkptLike) -> LogitFusionModel:
    rgb, rc = restore_model(rgb_ckpt)
    hsi, hc = restore_model(hsi_ckpt)
    if rc.meta.get("num_classes") != hc.meta.get("num_classes"):
        raise ValueError(
            f"class-count mismatch between checkpoints: {rc.meta.get('num_classes')} vs {hc.meta.get('num_classes')}"
        )
    return LogitFusionModel(rgb, hsi)


def logit_fusion_train(rgb_ckpt: CkptLike, hsi_ckpt: CkptLike, train_ds: PairDataset,
                       val_ds: Optional[PairDataset], cfg: TrainConfig, meta: Optional[dict] = None,
                       **kw) -> tuple[LogitFusionModel, TrainResult]:
    """Fine-tune both unimodal models and the 1x1 mixer jointly."""
    model = logit_fusion_model(rgb_ckpt, hsi_ckpt)
    return model, train_phase(model, train_ds, val_ds, cfg, meta=meta, **kw)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


def run_training(cfg: RunConfig, splits: dict[str, list[SamplePair]], out_dir=None, device="cpu",
                 log: Optional[Callable[[dict], None]] = None, seed: Optional[int] = None):
    """Build, initialise and train the model described by ``cfg``.

    Writes ``best.ckpt``, ``last.ckpt`` and ``metrics.json`` to ``out_dir``
    when given. Returns ``(model, result, stats)``.
    """
    first = splits["train"][0]
    num_classes, bands = first.num_classes, first.bands
    train_cfg = cfg.train
    if seed is not None:
        train_cfg = TrainConfig.from_json({**train_cfg.to_json(), "seed": seed})
    train_ds, val_ds, stats = make_datasets(splits, train_cfg)
    init = cfg["init"]
    if cfg.modality == "logit_fusion":
        if not init:
            raise ValueError("logit fusion needs unimodal checkpoints in config 'init'")
        model = logit_fusion_model(init["rgb"], init["hsi"])
    else:
        torch.manual_seed(train_cfg.seed)
        model = build_model(cfg, num_classes, bands)
        if cfg.modality == "fusion" and init:
            init_fusion(model, init["rgb"], init["hsi"])
    meta = {**model_meta(cfg, num_classes, bands), "norm_stats": stats.to_json(), "seed": train_cfg.seed}
    if cfg.modality == "logit_fusion":
        meta["submodels"] = {"rgb": init["rgb"], "hsi": init["hsi"]}
    result = train_phase(model, train_ds, val_ds, train_cfg, device=device, log=log, meta=meta)
    # callers get the best-validation weights, not the last epoch's
    model.load_state_dict(result.best.tensors)
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out / "best.ckpt", result.best)
        save_checkpoint(out / "last.ckpt", result.last)
        report = iou_report(evaluate(model, val_ds, device=device)) if val_ds else {}
        write_json(out / "metrics.json", {"config_hash": cfg.config_hash(), "best_epoch": result.best_epoch,
                                          "val": report, "history": result.history})
    return model, result, stats
