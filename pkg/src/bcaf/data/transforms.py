"""Paired geometric / photometric augmentation, background re-zeroing,
normalisation and HSI-only misalignment shifts.

Geometry lives in shared physical coordinates (fine-pixel units), so one draw
of rotation, scale, flips and crop maps consistently onto both grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .sample import SamplePair

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentConfig:
    rotation: float = 5.0            # degrees, symmetric range
    scale: tuple = (0.8, 1.3)
    flip_p: float = 0.5
    crop: Optional[tuple] = None     # fine-grid (h, w); None keeps the full frame
    photometric_p: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.03
    hsi_add: float = 0.10
    hsi_mul: float = 0.10
    hsi_jitter: bool = True

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation=0.0, scale=(1.0, 1.0), flip_p=0.0, photometric_p=0.0, hsi_jitter=False)


@dataclass(frozen=True)
class Geometry:
    angle: float = 0.0            # degrees, counter-clockwise
    scale: float = 1.0
    flip_h: bool = False
    flip_v: bool = False
    origin: tuple = (0, 0)        # crop origin on the coarse grid
    crop: Optional[tuple] = None  # crop size on the coarse grid

    @property
    def is_affine_identity(self) -> bool:
        return self.angle == 0 and self.scale == 1


def foreground_mask(hsi: np.ndarray) -> np.ndarray:
    """Pixels whose spectrum is not identically zero (uses no label information)."""
    return np.any(hsi != 0, axis=-1)


def _inverse_grid(shape: tuple[int, int], unit: float, extent: tuple[float, float], g: Geometry) -> torch.Tensor:
    """``grid_sample`` grid sending each output pixel centre to its source location.

    ``unit`` is this grid's pixel size and ``extent`` the frame size, both in
    fine-pixel units.
    """
    h, w = shape
    eh, ew = extent
    y = (torch.arange(h, dtype=torch.float64) + 0.5) * unit
    x = (torch.arange(w, dtype=torch.float64) + 0.5) * unit
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    cy, cx = eh / 2, ew / 2
    t = math.radians(g.angle)
    c, s = math.cos(t), math.sin(t)
    dy, dx = (yy - cy) / g.scale, (xx - cx) / g.scale
    sx = cx + c * dx - s * dy
    sy = cy + s * dx + c * dy
    return torch.stack([2 * sx / ew - 1, 2 * sy / eh - 1], dim=-1)[None]


def _warp(a: np.ndarray, grid: torch.Tensor, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
    flat = t.ndim == 2
    if flat:
        t = t[..., None]
    out = F.grid_sample(t.permute(2, 0, 1)[None], grid, mode=mode, padding_mode="zeros", align_corners=False)
    out = out[0].permute(1, 2, 0).numpy()
    return out[..., 0] if flat else out


def _flip_crop(a: np.ndarray, g: Geometry, unit: int) -> np.ndarray:
    """Flips then crop; ``unit`` converts coarse crop coordinates to this grid."""
    if g.flip_h:
        a = a[:, ::-1]
    if g.flip_v:
        a = a[::-1]
    if g.crop is not None:
        oy, ox = g.origin[0] * unit, g.origin[1] * unit
        a = a[oy:oy + g.crop[0] * unit, ox:ox + g.crop[1] * unit]
    return np.ascontiguousarray(a)


def apply_geometry(s: SamplePair, g: Geometry) -> tuple[SamplePair, np.ndarray]:
    """Warp rgb / hsi / mask with one transform and re-zero the HSI background.

    Returns the new sample and the transformed binary HSI foreground mask.
    """
    r = s.r
    hf, wf = s.fine_shape
    hc, wc = s.coarse_shape
    fg = foreground_mask(s.hsi)
    rgb, hsi, mask = s.rgb, s.hsi, s.mask
    if not g.is_affine_identity:
        extent = (float(hf), float(wf))
        gf = _inverse_grid((hf, wf), 1.0, extent, g)
        gc = _inverse_grid((hc, wc), float(r), extent, g)
        rgb = _warp(rgb, gf, "bilinear").astype(np.float32)
        hsi = _warp(hsi, gc, "bilinear").astype(np.float32)
        mask = np.rint(_warp(mask.astype(np.float64), gf, "nearest")).astype(s.mask.dtype)
        fg = _warp(fg.astype(np.float64), gc, "nearest") > 0.5
    rgb, mask = _flip_crop(rgb, g, r), _flip_crop(mask, g, r)
    hsi, fg = _flip_crop(hsi, g, 1), _flip_crop(fg, g, 1)
    hsi = background_remask(hsi, fg)
    return s.copy(rgb=rgb, hsi=hsi, mask=mask), fg


def background_remask(hsi: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Multiply the cube by a binary foreground mask so background is exactly zero."""
    if fg.shape != hsi.shape[:2]:
        raise ValueError(f"mask {fg.shape} does not match HSI grid {hsi.shape[:2]}")
    return hsi * fg[..., None].astype(hsi.dtype)


def sample_geometry(s: SamplePair, cfg: AugmentConfig, rng: np.random.Generator) -> Geometry:
    hc, wc = s.coarse_shape
    crop = None
    origin = (0, 0)
    if cfg.crop is not None:
        ch, cw = cfg.crop
        if ch > s.fine_shape[0] or cw > s.fine_shape[1]:
            raise ValueError(f"crop {cfg.crop} is larger than the image {s.fine_shape}")
        if ch % s.r or cw % s.r:
            raise ValueError(f"crop {cfg.crop} must be a multiple of the grid ratio {s.r}")
        crop = (ch // s.r, cw // s.r)
        origin = (int(rng.integers(0, hc - crop[0] + 1)), int(rng.integers(0, wc - crop[1] + 1)))
    return Geometry(
        angle=float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0,
        scale=float(rng.uniform(*cfg.scale)) if cfg.scale[0] != cfg.scale[1] else float(cfg.scale[0]),
        flip_h=bool(rng.random() < cfg.flip_p),
        flip_v=bool(rng.random() < cfg.flip_p),
        origin=origin,
        crop=crop,
    )


def photometric_jitter(rgb: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation, hue in that order, each factor drawn independently."""
    img = torch.from_numpy(np.ascontiguousarray(rgb)).permute(2, 0, 1)
    img = TF.adjust_brightness(img, float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)))
    img = TF.adjust_contrast(img, float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)))
    img = TF.adjust_saturation(img, float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)))
    img = TF.adjust_hue(img, float(rng.uniform(-cfg.hue, cfg.hue)))
    return img.permute(1, 2, 0).contiguous().numpy()


def hsi_jitter(hsi: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """``x * m + a`` on non-zero elements only; zeros (background) are untouched."""
    a = rng.uniform(-cfg.hsi_add, cfg.hsi_add)
    m = rng.uniform(1 - cfg.hsi_mul, 1 + cfg.hsi_mul)
    return np.where(hsi != 0, hsi * m + a, hsi).astype(hsi.dtype)


def paired_augment(s: SamplePair, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                   return_mask: bool = False):
    """Training-time augmentation of one co-registered sample."""
    g = sample_geometry(s, cfg, rng)
    out, fg = apply_geometry(s, g)
    rgb = out.rgb
    if cfg.photometric_p > 0 and rng.random() < cfg.photometric_p:
        rgb = photometric_jitter(rgb, cfg, rng)
    hsi = hsi_jitter(out.hsi, cfg, rng) if cfg.hsi_jitter else out.hsi
    out = out.copy(rgb=rgb, hsi=hsi)
    return (out, fg) if return_mask else out


@dataclass
class NormStats:
    rgb_mean: np.ndarray
    rgb_std: np.ndarray
    hsi_mean: np.ndarray
    hsi_std: np.ndarray

    def __post_init__(self):
        for name in ("rgb_mean", "rgb_std", "hsi_mean", "hsi_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.rgb_std <= 0):
            raise ValueError(f"RGB std must be positive; zero at channels {np.flatnonzero(self.rgb_std <= 0).tolist()}")
        bad = np.flatnonzero(~(self.hsi_std > 0))
        if bad.size:
            raise ValueError(f"HSI std is zero at band(s) {bad.tolist()}")

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("rgb_mean", "rgb_std", "hsi_mean", "hsi_std")}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(**d)


def compute_norm_stats(samples: Sequence[SamplePair], rgb_mean=IMAGENET_MEAN, rgb_std=IMAGENET_STD) -> NormStats:
    """Per-band HSI mean/std over foreground (non-zero spectrum) pixels of ``samples``."""
    total, acc, acc2 = 0, None, None
    for s in samples:
        px = s.hsi[foreground_mask(s.hsi)].astype(np.float64)
        if acc is None:
            acc = np.zeros(s.bands)
            acc2 = np.zeros(s.bands)
        total += px.shape[0]
        acc += px.sum(axis=0)
        acc2 += (px**2).sum(axis=0)
    if not total:
        raise ValueError("no foreground HSI pixels to compute statistics from")
    mean = acc / total
    var = np.maximum(acc2 / total - mean**2, 0.0)
    return NormStats(np.asarray(rgb_mean), np.asarray(rgb_std), mean, np.sqrt(var))


def normalize(s: SamplePair, stats: NormStats) -> SamplePair:
    """Standardise RGB per channel and HSI per band; background maps to ``-mean/std``."""
    if stats.hsi_mean.shape[0] != s.bands:
        raise ValueError(f"stats cover {stats.hsi_mean.shape[0]} bands, sample has {s.bands}")
    rgb = ((s.rgb - stats.rgb_mean) / stats.rgb_std).astype(np.float32)
    hsi = ((s.hsi - stats.hsi_mean) / stats.hsi_std).astype(np.float32)
    return s.copy(rgb=rgb, hsi=hsi)


def normalized_background(stats: NormStats) -> np.ndarray:
    """The value a zero spectrum takes after :func:`normalize`."""
    return ((0.0 - stats.hsi_mean) / stats.hsi_std).astype(np.float32)


def shift_hsi(s: SamplePair, dx: int, dy: int) -> SamplePair:
    """Translate the HSI cube by ``(dx, dy)`` coarse pixels (x = columns), zero-filling.

    RGB and mask are untouched.
    """
    hc, wc = s.coarse_shape
    if abs(dx) >= wc or abs(dy) >= hc:
        raise ValueError(f"shift ({dx}, {dy}) out of range for a {hc}x{wc} HSI grid")
    out = np.zeros_like(s.hsi)
    ys, yd = (slice(0, hc - dy), slice(dy, hc)) if dy >= 0 else (slice(-dy, hc), slice(0, hc + dy))
    xs, xd = (slice(0, wc - dx), slice(dx, wc)) if dx >= 0 else (slice(-dx, wc), slice(0, wc + dx))
    out[yd, xd] = s.hsi[ys, xs]
    return s.copy(hsi=out)


def upscale_rgb(s: SamplePair, factor: int, mode: str = "bilinear") -> SamplePair:
    """Resample RGB (and the fine-grid mask) ``factor`` times larger, raising the ratio to ``r * factor``.

    This studies RGB resolution alone: the HSI cube is untouched. The mask
    always uses nearest-neighbour so labels stay valid.
    """
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upscale factor must be a positive integer, got {factor}")
    if mode not in ("bilinear", "bicubic", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    factor = int(factor)
    if factor == 1:
        return s.copy()
    h, w = s.fine_shape
    size = (h * factor, w * factor)
    x = torch.from_numpy(np.ascontiguousarray(s.rgb)).permute(2, 0, 1)[None]
    kw = {} if mode == "nearest" else {"align_corners": False}
    rgb = F.interpolate(x, size=size, mode=mode, **kw)[0].permute(1, 2, 0).clamp(0, 1).numpy()
    mask = np.repeat(np.repeat(s.mask, factor, axis=0), factor, axis=1)
    return s.copy(rgb=np.ascontiguousarray(rgb, dtype=np.float32), mask=mask, r=s.r * factor)
