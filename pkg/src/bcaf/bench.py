"""Analytic FLOPs, throughput measurement, misalignment sweeps, ablation tables and heatmaps.

FLOP convention: one multiply-add counts as 2 FLOPs. Only matrix products and
convolutions are counted (the same operations an instrumented counter such as
``torch.utils.flop_counter.FlopCounterMode`` sees); normalisation, softmax and
element-wise work are ignored.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import statistics
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig, config_hash
from .decoder import DecoderConfig
from .fusion import DIRECTIONS, REDUCERS, FusionPlan, se_hidden
from .grouping import SHARING_MODES, SpectralGrouping, compute_grouping
from .hsi_backbone import SPECTRAL_MODES
from .rgb_backbone import BackboneConfig, effective_window


# ----------------------------------------------------------------------------- FLOPs

@dataclass(frozen=True)
class InputSpec:
    H_f: int
    W_f: int
    H_c: int
    W_c: int
    S: int
    K: int
    r: int
    num_classes: int = 6
    batch: int = 1

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FlopReport:
    modules: dict
    spec: dict

    @property
    def total(self) -> int:
        return int(sum(self.modules.values()))

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def group(self, prefix: str) -> int:
        return int(sum(v for k, v in self.modules.items() if k.startswith(prefix)))

    def to_json(self) -> dict:
        return {"modules": self.modules, "total": self.total, "spec": self.spec, "convention": "multiply-add = 2"}


def linear_flops(tokens: int, cin: int, cout: int) -> int:
    return 2 * tokens * cin * cout


def conv_flops(h_out: int, w_out: int, cin: int, cout: int, k: int, groups: int = 1) -> int:
    return 2 * h_out * w_out * cout * (cin // groups) * k * k


def mlp_flops(tokens: int, dim: int, ratio: float) -> int:
    hidden = int(dim * ratio)
    return linear_flops(tokens, dim, hidden) + linear_flops(tokens, hidden, dim)


def swin_block_flops(h: int, w: int, dim: int, cfg: BackboneConfig, shift: int) -> int:
    wh, ww, _, _ = effective_window(h, w, cfg.window_size, shift)
    hp, wp = math.ceil(h / wh) * wh, math.ceil(w / ww) * ww
    t = hp * wp
    n = wh * ww
    attn = linear_flops(t, dim, 3 * dim) + 2 * (2 * t * n * dim) + linear_flops(t, dim, dim)
    return attn + mlp_flops(h * w, dim, cfg.mlp_ratio)


def spectral_attention_flops(h: int, w: int, k: int, dim: int, ratio: float) -> int:
    t = h * w * k
    return linear_flops(t, dim, 3 * dim) + 2 * (2 * h * w * k * k * dim) + linear_flops(t, dim, dim) + \
        mlp_flops(t, dim, ratio)


def spectral_conv_flops(h: int, w: int, k: int, dim: int, ratio: float, kernel: int) -> int:
    return 2 * h * w * k * dim * dim * kernel + mlp_flops(h * w * k, dim, ratio)


def _stage_grids(h: int, w: int, cfg: BackboneConfig) -> list[tuple[int, int]]:
    h, w = h // cfg.patch_size, w // cfg.patch_size
    out = []
    for i in range(cfg.num_stages):
        if i:
            h, w = h // 2, w // 2
        out.append((h, w))
    return out


def rgb_encoder_flops(h: int, w: int, cfg: BackboneConfig, in_chans: int = 3) -> dict:
    out = {}
    p = cfg.patch_size
    out["patch_embed"] = conv_flops(h // p, w // p, in_chans, cfg.dims[0], p)
    for i, ((gh, gw), dim) in enumerate(zip(_stage_grids(h, w, cfg), cfg.dims)):
        if i:
            out[f"stage{i + 1}.merge"] = linear_flops(gh * gw, 4 * cfg.dims[i - 1], dim)
        out[f"stage{i + 1}.blocks"] = sum(
            swin_block_flops(gh, gw, dim, cfg, 0 if j % 2 == 0 else cfg.shift) for j in range(cfg.depths[i])
        )
    return out


def hsi_encoder_flops(h: int, w: int, g: SpectralGrouping, cfg: BackboneConfig, sharing_mode: str = "shared",
                      spectral_mode: str = "attention", spectral_kernel: int = 3,
                      last_stage: Optional[int] = None) -> dict:
    out = {}
    p, k = cfg.patch_size, g.K
    c0 = cfg.dims[0]
    if sharing_mode == "single_projection":
        out["patch_embed"] = conv_flops(h // p, w // p, g.S_pad, k * c0, p)
    else:
        out["patch_embed"] = k * conv_flops(h // p, w // p, g.R_G, c0, p)
    stages = cfg.num_stages if last_stage is None else last_stage
    for i, ((gh, gw), dim) in enumerate(list(zip(_stage_grids(h, w, cfg), cfg.dims))[:stages]):
        if i:
            out[f"stage{i + 1}.merge"] = k * linear_flops(gh * gw, 4 * cfg.dims[i - 1], dim)
        spatial = sum(k * swin_block_flops(gh, gw, dim, cfg, 0 if j % 2 == 0 else cfg.shift)
                      for j in range(cfg.depths[i]))
        out[f"stage{i + 1}.spatial"] = spatial
        if k > 1:
            if spectral_mode == "attention":
                per = spectral_attention_flops(gh, gw, k, dim, cfg.mlp_ratio)
            else:
                per = spectral_conv_flops(gh, gw, k, dim, cfg.mlp_ratio, spectral_kernel)
            out[f"stage{i + 1}.spectral"] = cfg.depths[i] * per
    return out


def cross_attention_score_flops(dim: int, hc: int, wc: int, r: int, k: int) -> int:
    """Score term ``Q K^T`` of one direction: ``2 * h * d_h * H_c * W_c * r^2 * K``."""
    return 2 * dim * hc * wc * r * r * k


def fusion_stage_flops(dim: int, hc: int, wc: int, r: int, k: int, direction: str = "bidirectional",
                       ratio: float = 4.0, reducer: str = "se") -> dict:
    hf, wf = hc * r, wc * r
    fine, coarse = hf * wf, hc * wc * k
    score = cross_attention_score_flops(dim, hc, wc, r, k)
    out = {}
    if direction in ("bidirectional", "f2c"):
        out["f2c.score"] = score
        out["f2c.value"] = score
        out["f2c.proj"] = linear_flops(fine, dim, dim) * 2 + linear_flops(coarse, dim, dim) * 2
        out["f2c.ffn"] = mlp_flops(fine, dim, ratio)
    if direction in ("bidirectional", "c2f"):
        out["c2f.score"] = score
        out["c2f.value"] = score
        out["c2f.proj"] = linear_flops(coarse, dim, dim) * 2 + linear_flops(fine, dim, dim) * 2
        out["c2f.ffn"] = mlp_flops(coarse, dim, ratio)
    out["pool"] = se_pool_flops(dim, k) if reducer == "se" else 0
    return out


def se_pool_flops(dim: int, k: int) -> int:
    ch = se_hidden(dim)
    return linear_flops(k, dim, ch) + linear_flops(k, ch, dim)


def decoder_flops(stage_grids: Sequence[tuple[int, int]], stage_dims: Sequence[int], cfg: DecoderConfig) -> dict:
    out = {}
    for i, ((h, w), c, wd) in enumerate(zip(stage_grids, stage_dims, cfg.stage_widths())):
        out[f"adapter{i + 1}"] = conv_flops(h, w, c, wd, 1)
    w0, w1, w2 = cfg.widths
    chans = [(w0, w0), (w0, w1), (w1, w2)]
    for j, (cin, cout) in enumerate(chans):
        h, w = stage_grids[3 - j]
        out[f"up{j + 1}.transpose"] = 2 * h * w * cin * cout * 4
        out[f"up{j + 1}.refine"] = conv_flops(2 * h, 2 * w, 2 * cout, cout, 3) + conv_flops(2 * h, 2 * w, cout, cout, 3)
    h, w = stage_grids[0]
    out["classifier"] = conv_flops(h, w, w2, cfg.out_channels, 1)
    return out


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def count_flops(cfg: RunConfig, spec: InputSpec) -> FlopReport:
    """Closed-form FLOPs of one forward pass of the model ``cfg`` describes, at batch ``spec.batch``."""
    m = cfg.modality
    n = spec.num_classes
    mods: dict[str, int] = {}
    g = compute_grouping(spec.S, spec.K) if m != "rgb" else None
    hsi_kw = dict(sharing_mode=cfg["sharing_mode"], spectral_mode=cfg["spectral_mode"],
                  spectral_kernel=cfg["spectral_kernel"])
    if m in ("rgb", "logit_fusion"):
        rcfg = cfg.rgb_backbone
        dec = cfg.with_overrides(modality="rgb").decoder(n)
        pre = "rgb_model." if m == "logit_fusion" else ""
        mods.update(_prefixed(pre + "encoder", rgb_encoder_flops(spec.H_f, spec.W_f, rcfg)))
        mods.update(_prefixed(pre + "decoder", decoder_flops(_stage_grids(spec.H_f, spec.W_f, rcfg), rcfg.dims, dec)))
    if m in ("hsi", "logit_fusion"):
        hcfg = cfg.hsi_backbone
        dec = cfg.with_overrides(modality="hsi").decoder(n)
        pre = "hsi_model." if m == "logit_fusion" else ""
        grids = _stage_grids(spec.H_c, spec.W_c, hcfg)
        mods.update(_prefixed(pre + "encoder", hsi_encoder_flops(spec.H_c, spec.W_c, g, hcfg, **hsi_kw)))
        if cfg["reducer"] == "se":
            mods.update({f"{pre}reducer{i + 1}": se_pool_flops(d, g.K) for i, d in enumerate(hcfg.dims)})
        mods.update(_prefixed(pre + "decoder", decoder_flops(grids, hcfg.dims, dec)))
    if m == "logit_fusion":
        hf, wf = _stage_grids(spec.H_f, spec.W_f, cfg.rgb_backbone)[0]
        mods["mix"] = conv_flops(hf, wf, 2 * (n + 1), n + 1, 1)
    if m == "fusion":
        rcfg, hcfg = cfg.rgb_backbone, cfg.hsi_backbone
        plan = cfg.plan
        mods.update(_prefixed("rgb", rgb_encoder_flops(spec.H_f, spec.W_f, rcfg)))
        mods.update(_prefixed("hsi", hsi_encoder_flops(spec.H_c, spec.W_c, g, hcfg, **hsi_kw,
                                                       last_stage=max(plan.active_stages))))
        cgrids = _stage_grids(spec.H_c, spec.W_c, hcfg)
        for s in plan.active_stages:
            hc, wc = cgrids[s - 1]
            mods.update(_prefixed(f"fusion{s}", fusion_stage_flops(rcfg.dims[s - 1], hc, wc, spec.r, g.K,
                                                                   plan.direction, rcfg.mlp_ratio, cfg["reducer"])))
        dec = cfg.decoder(n)
        mods.update(_prefixed("decoder", decoder_flops(_stage_grids(spec.H_f, spec.W_f, rcfg), rcfg.dims, dec)))
    mods = {k: int(v) * spec.batch for k, v in mods.items()}
    return FlopReport(mods, spec.to_json())


def instrumented_flops(model: nn.Module, *inputs) -> int:
    """FLOPs of one forward pass as seen by torch's operator-level counter."""
    from torch.utils.flop_counter import FlopCounterMode

    with torch.no_grad(), FlopCounterMode(display=False) as fc:
        model(*inputs)
    return int(fc.get_total_flops())


# ----------------------------------------------------------------------------- throughput

@dataclass(frozen=True)
class BenchProtocol:
    warmup_iters: int = 100
    timed_iters: int = 1000
    runs: int = 20
    batch: int = 1
    precision: str = "fp32"
    variance_limit: float = 0.5


@dataclass
class ThroughputReport:
    images_per_s: float
    run_seconds: list
    protocol: dict
    variance_warning: bool
    spread: float

    def to_json(self) -> dict:
        return asdict(self)


def _sync(device) -> None:
    if torch.device(device).type == "cuda":
        torch.cuda.synchronize()


def measure_throughput(fn: Callable[[], object], protocol: BenchProtocol = BenchProtocol(),
                       device="cpu") -> ThroughputReport:
    """Median images/s of ``fn`` (one forward pass on ``protocol.batch`` images) over runs.

    ``spread`` is ``(max - min) / median`` of the per-run times; above
    ``variance_limit`` the report carries a warning flag.
    """
    with torch.no_grad():
        for _ in range(protocol.warmup_iters):
            fn()
        _sync(device)
        times = []
        for _ in range(protocol.runs):
            _sync(device)
            t0 = time.perf_counter()
            for _ in range(protocol.timed_iters):
                fn()
            _sync(device)
            times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    spread = (max(times) - min(times)) / med if med > 0 else 0.0
    flag = spread > protocol.variance_limit
    if flag:
        warnings.warn(f"timing spread {spread:.0%} across runs exceeds {protocol.variance_limit:.0%}")
    ips = protocol.timed_iters * protocol.batch / med if med > 0 else float("inf")
    return ThroughputReport(ips, times, asdict(protocol), flag, spread)


def synthetic_inputs(spec: InputSpec, device="cpu", dtype=torch.float32, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    rgb = torch.randn(spec.batch, spec.H_f, spec.W_f, 3, generator=gen, dtype=dtype).to(device)
    hsi = torch.randn(spec.batch, spec.H_c, spec.W_c, spec.S, generator=gen, dtype=dtype).to(device)
    return rgb, hsi


def model_throughput(model: nn.Module, spec: InputSpec, protocol: BenchProtocol = BenchProtocol(),
                     device="cpu") -> ThroughputReport:
    model.eval().to(device)
    rgb, hsi = synthetic_inputs(spec, device)
    return measure_throughput(lambda: model(rgb, hsi), protocol, device)


# ----------------------------------------------------------------------------- misalignment

DEFAULT_SHIFTS = ((0, 0), (2, 2), (4, 4), (8, 8), (16, 16), (32, 32), (64, 64))


def shift_sweep(model: nn.Module, samples, stats, shifts=DEFAULT_SHIFTS, device="cpu",
                batch_size: int = 4) -> list[dict]:
    """mIoU under HSI-only translations; shifts beyond the HSI extent are skipped with a note."""
    from .data.dataset import PairDataset
    from .metrics import miou
    from .training.trainer import evaluate

    hc, wc = samples[0].coarse_shape
    rows = []
    for dx, dy in shifts:
        if abs(dx) >= wc or abs(dy) >= hc:
            rows.append({"dx": dx, "dy": dy, "miou": None, "note": f"skipped: exceeds HSI extent {hc}x{wc}"})
            continue
        ds = PairDataset(samples, stats, shift=(dx, dy))
        rows.append({"dx": dx, "dy": dy, "miou": miou(evaluate(model, ds, batch_size, device)), "note": ""})
    return rows


# ----------------------------------------------------------------------------- ablations

ABLATION_AXES = {
    "fusion_stages": ([1], [4], [1, 2, 3, 4]),
    "direction": DIRECTIONS,
    "embedding": SHARING_MODES,
    "spectral_modeling": SPECTRAL_MODES,
    "reducer": REDUCERS,
    "k_slices": (1, 3, 5, 7, 10),
    "init": ("unimodal", "random"),
}
CSV_FIELDS = ("config_hash", "axis", "value", "miou_mean", "miou_std", "images_per_s", "gflops", "seeds")


def _override(raw: dict, axis: str, value) -> dict:
    raw = copy.deepcopy(raw)
    if axis == "fusion_stages":
        raw["fusion"] = {**raw.get("fusion", {}), "stages": list(value)}
    elif axis == "direction":
        raw["fusion"] = {**raw.get("fusion", {}), "direction": value}
    elif axis == "embedding":
        raw["sharing_mode"] = value
    elif axis == "spectral_modeling":
        raw["spectral_mode"] = value
    elif axis == "reducer":
        raw["reducer"] = value
    elif axis == "k_slices":
        raw["k_slices"] = int(value)
    elif axis == "init":
        if value == "random":
            raw["init"] = {}
        elif not raw.get("init"):
            raise ValueError("init=unimodal needs 'init' checkpoints in the baseline config")
    return raw


def expand_axes(base: dict, axes: dict) -> list[tuple[str, object, dict]]:
    """One row per axis value, each varying a single axis from ``base``."""
    rows = []
    if not axes:
        return [("baseline", None, copy.deepcopy(base))]
    for axis, values in axes.items():
        if axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
        allowed = [list(v) if isinstance(v, (list, tuple)) else v for v in ABLATION_AXES[axis]]
        for v in values:
            v = list(v) if isinstance(v, (list, tuple)) else v
            if v not in allowed:
                raise ValueError(f"unknown value {v!r} for axis {axis!r}; allowed {allowed}")
            rows.append((axis, v, _override(base, axis, v)))
    return rows


def ablation_sweep(base: dict, axes: dict, runner: Callable[[dict, int], dict], seeds: Sequence[int] = (0,),
                   out_dir=None) -> list[dict]:
    """Run ``runner(raw_config, seed) -> {"miou", "images_per_s", "gflops"}`` for every row.

    Rows report mean and std of mIoU over ``seeds``; with ``out_dir`` the
    table is written as ``ablation.csv`` and ``ablation.json``.
    """
    table = []
    for axis, value, raw in expand_axes(base, axes):
        results = [runner(raw, s) for s in seeds]
        mious = [r["miou"] for r in results]
        table.append({
            "config_hash": config_hash(raw),
            "axis": axis,
            "value": value,
            "miou_mean": float(np.mean(mious)),
            "miou_std": float(np.std(mious)),
            "images_per_s": float(np.mean([r.get("images_per_s", float("nan")) for r in results])),
            "gflops": float(np.mean([r.get("gflops", float("nan")) for r in results])),
            "seeds": list(seeds),
        })
    if out_dir is not None:
        write_table(out_dir, "ablation", table)
    return table


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_table(out_dir, stem: str, rows: list[dict], fields: Sequence[str] = CSV_FIELDS) -> None:
    out = Path(out_dir)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in row.items()})
    _atomic_text(out / f"{stem}.csv", buf.getvalue())
    _atomic_text(out / f"{stem}.json", json.dumps(rows, indent=1))


# ----------------------------------------------------------------------------- heatmaps

def heatmap(feature: np.ndarray) -> np.ndarray:
    """Channel mean of a channels-last ``(H, W, C)`` map, min-max scaled to [0, 1].

    A constant map has no range and maps to all zeros.
    """
    m = np.asarray(feature, dtype=np.float64).mean(axis=-1)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


@torch.no_grad()
def stage_features(model: nn.Module, rgb: torch.Tensor, hsi: torch.Tensor) -> list[torch.Tensor]:
    """The four 2D maps each model hands its decoder, channels-last."""
    model.eval()
    kind = getattr(model, "modality", "")
    if kind == "fusion":
        return model(rgb, hsi, return_stages=True)[1]
    if kind == "rgb":
        return model.backbone(rgb)
    if kind == "hsi":
        return [red(f) for red, f in zip(model.reducers, model.backbone(hsi))]
    if kind == "logit_fusion":
        return model.rgb_model.backbone(rgb)
    raise ValueError(f"no stage features for model type {type(model).__name__}")


def export_heatmaps(model: nn.Module, rgb: torch.Tensor, hsi: torch.Tensor, out_dir, cmap: str = "magma") -> list[Path]:
    """One PNG per stage for the first image of the batch."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(stage_features(model, rgb, hsi)):
        hm = heatmap(f[0].float().cpu().numpy())
        p = out / f"stage{i + 1}.png"
        plt.imsave(p, hm, cmap=cmap, vmin=0.0, vmax=1.0)
        paths.append(p)
    return paths
