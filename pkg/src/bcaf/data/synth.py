"""Synthetic co-registered RGB / HSI scenes with controllable class cues.

Objects are smooth star-shaped blobs defined in continuous image
coordinates, so the fine (RGB, label) grid and the coarse (HSI) grid see the
same geometry. HSI pixels integrate the fine-grid spectra over their ``r x r``
footprint, which leaves background pixels exactly zero.

Class channel modes:

``spectral_only``
    Class decides the spectrum; RGB colour and texture are drawn from one
    class-independent distribution.
``spatial_only``
    Every class shares one spectrum; class decides the RGB texture.
``both``
    The first ``ceil(N/2)`` classes are spectral (plain RGB, distinct
    spectra); the rest are spatial (shared featureless spectrum, distinct
    textures).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .sample import SamplePair

CLASS_CHANNELS = ("spectral_only", "spatial_only", "both")
TEXTURES = ("plain", "stripes_h", "stripes_v", "checker", "diag", "dots")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    class_channel: str = "spectral_only"
    rgb_size: int = 64
    ratio: int = 2
    bands: int = 30
    objects: tuple = (2, 4)
    radius: tuple = (0.12, 0.24)
    noise_scale: float = 0.02
    feature_depth: float = 0.25
    feature_width: float = 0.03
    gain_jitter: float = 0.15
    tilt_jitter: float = 0.3
    texture_amp: float = 0.35
    texture_period: tuple = (3.0, 5.0)
    rgb_noise: float = 0.02
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(int(v) for v in self.objects))
        object.__setattr__(self, "radius", tuple(float(v) for v in self.radius))
        object.__setattr__(self, "texture_period", tuple(float(v) for v in self.texture_period))
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class (N >= 1)")
        if self.class_channel not in CLASS_CHANNELS:
            raise ValueError(f"unknown class channel {self.class_channel!r}; choose from {CLASS_CHANNELS}")
        if self.rgb_size % self.ratio:
            raise ValueError(f"rgb_size {self.rgb_size} is not a multiple of ratio {self.ratio}")
        if not 0 <= self.objects[0] <= self.objects[1]:
            raise ValueError(f"bad object count range {self.objects}")
        if self.class_channel != "spectral_only" and self.num_classes > len(TEXTURES) - 1:
            raise ValueError(f"at most {len(TEXTURES) - 1} texture-defined classes are available")

    @property
    def hsi_size(self) -> int:
        return self.rgb_size // self.ratio

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("objects", "radius", "texture_period"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def spectral_classes(spec: SynthSpec) -> list[int]:
    """Foreground classes whose identity is carried by the spectrum."""
    n = spec.num_classes
    if spec.class_channel == "spectral_only":
        return list(range(1, n + 1))
    if spec.class_channel == "spatial_only":
        return []
    return list(range(1, math.ceil(n / 2) + 1))


def class_signatures(spec: SynthSpec) -> np.ndarray:
    """Mean spectra, ``(N+1, S)``; row 0 (background) is zero.

    Spectral classes get one narrow absorption feature at a class-specific
    wavelength on a shared smooth baseline; every other class gets the bare
    baseline.
    """
    s, n = spec.bands, spec.num_classes
    lam = (np.arange(s) + 0.5) / s
    base = 0.45 + 0.12 * np.sin(2 * np.pi * 0.8 * lam + 0.3) + 0.08 * lam
    sig = np.zeros((n + 1, s))
    spectral = spectral_classes(spec)
    for c in range(1, n + 1):
        sig[c] = base
    for j, c in enumerate(spectral):
        mu = (j + 1) / (len(spectral) + 1)
        sig[c] = base - spec.feature_depth * np.exp(-0.5 * ((lam - mu) / spec.feature_width) ** 2)
    return sig


def class_textures(spec: SynthSpec) -> dict[int, Optional[str]]:
    """Texture fixed by class, or ``None`` when the texture is random."""
    spectral = set(spectral_classes(spec))
    out, tex = {}, iter(TEXTURES[1:])
    for c in range(1, spec.num_classes + 1):
        if spec.class_channel == "spectral_only":
            out[c] = None
        elif c in spectral:
            out[c] = "plain"
        else:
            out[c] = next(tex)
    return out


def _texture(kind: str, ii: np.ndarray, jj: np.ndarray, period: float, phase: float) -> np.ndarray:
    w = 2 * np.pi / period
    if kind == "plain":
        return np.zeros_like(ii)
    if kind == "stripes_h":
        return np.sign(np.sin(w * ii + phase))
    if kind == "stripes_v":
        return np.sign(np.sin(w * jj + phase))
    if kind == "checker":
        return np.sign(np.sin(w * ii + phase) * np.sin(w * jj + phase))
    if kind == "diag":
        return np.sign(np.sin(w * (ii + jj) / math.sqrt(2) + phase))
    if kind == "dots":
        return np.where(np.cos(w * ii + phase) * np.cos(w * jj + phase) > 0.5, 1.0, -1.0)
    raise ValueError(f"unknown texture {kind!r}")


def _blob(rng, spec: SynthSpec):
    cy, cx = rng.uniform(0.1, 0.9, size=2)
    r0 = rng.uniform(*spec.radius)
    aspect = rng.uniform(0.7, 1.3)
    theta0 = rng.uniform(0, np.pi)
    lobes = int(rng.integers(2, 5))
    wobble = rng.uniform(0.0, 0.2)
    phase = rng.uniform(0, 2 * np.pi)

    def inside(y, x):
        dy, dx = y - cy, x - cx
        c, s = math.cos(theta0), math.sin(theta0)
        u, v = c * dx + s * dy, (-s * dx + c * dy) * aspect
        rad = np.hypot(u, v)
        ang = np.arctan2(v, u)
        return rad <= r0 * (1 + wobble * np.sin(lobes * ang + phase))

    return inside


def render_scene(spec: SynthSpec, rng: np.random.Generator) -> SamplePair:
    hf = spec.rgb_size
    r, s = spec.ratio, spec.bands
    sig = class_signatures(spec)
    fixed_tex = class_textures(spec)
    lam = (np.arange(s) + 0.5) / s
    ii, jj = np.meshgrid(np.arange(hf, dtype=np.float64), np.arange(hf, dtype=np.float64), indexing="ij")
    yc, xc = (ii + 0.5) / hf, (jj + 0.5) / hf

    mask = np.zeros((hf, hf), dtype=np.int64)
    rgb = 0.12 + spec.rgb_noise * rng.standard_normal((hf, hf, 3))
    fine_spec = np.zeros((hf, hf, s))
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    for _ in range(n_obj):
        cls = int(rng.integers(1, spec.num_classes + 1))
        inside = _blob(rng, spec)(yc, xc)
        if not inside.any():
            continue
        # spectrum: class signature with a per-object gain and spectral tilt
        gain = 1 + spec.gain_jitter * rng.uniform(-1, 1)
        tilt = 1 + spec.tilt_jitter * rng.uniform(-1, 1) * (lam - 0.5)
        obj_spec = sig[cls] * gain * tilt
        # appearance: colour always random, texture random or class-bound
        kind = fixed_tex[cls] or TEXTURES[int(rng.integers(len(TEXTURES)))]
        color = rng.uniform(0.35, 0.9, size=3)
        pattern = _texture(kind, ii, jj, rng.uniform(*spec.texture_period), rng.uniform(0, 2 * np.pi))
        obj_rgb = color * (1 + spec.texture_amp * pattern)[..., None]
        mask[inside] = cls
        rgb[inside] = obj_rgb[inside] + spec.rgb_noise * rng.standard_normal((int(inside.sum()), 3))
        fine_spec[inside] = obj_spec

    fg = mask > 0
    fine_spec[fg] += spec.noise_scale * rng.standard_normal((int(fg.sum()), s))
    fine_spec[fg] = np.maximum(fine_spec[fg], 1e-3)
    hc = hf // r
    hsi = fine_spec.reshape(hc, r, hc, r, s).mean(axis=(1, 3))
    return SamplePair(
        rgb=np.clip(rgb, 0, 1).astype(np.float32),
        hsi=hsi.astype(np.float32),
        mask=mask.astype(np.uint16),
        r=r,
        num_classes=spec.num_classes,
        class_names=["background"] + [f"class_{c}" for c in range(1, spec.num_classes + 1)],
    )


def split_indices(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Seeded, disjoint partition of scene indices into train / val / test."""
    total = spec.n_train + spec.n_val + spec.n_test
    perm = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD5])).permutation(total)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]), "test": np.sort(perm[b:])}


def scene_rng(spec: SynthSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, int(index)]))


def synthesize_dataset(spec: SynthSpec) -> dict[str, list[SamplePair]]:
    """Deterministic given ``spec.seed``; every scene has its own RNG stream."""
    return {
        split: [render_scene(spec, scene_rng(spec, int(i))) for i in idx]
        for split, idx in split_indices(spec).items()
    }


def write_dataset(root, spec: SynthSpec) -> dict[str, list[SamplePair]]:
    from .sample import write_split

    data = synthesize_dataset(spec)
    idx = split_indices(spec)
    for split, samples in data.items():
        write_split(root, split, samples, extra={"synth": spec.to_json(), "scene_indices": idx[split].tolist()})
    return data
