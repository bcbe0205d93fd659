"""Localised bidirectional RGB <-> HSI cross-attention and gated modality fusion.

Fine RGB features are ``(B, H_f, W_f, C)``, coarse HSI features
``(B, H_c, W_c, K, C)`` with ``H_f = r * H_c`` and ``W_f = r * W_c``. Every
coarse location (a *parent*) owns ``r*r`` fine *children*; attention never
crosses parents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .layers import Mlp, check_heads, init_trunc_normal, merge_heads, scaled_dot_attention, split_heads

DIRECTIONS = ("bidirectional", "f2c", "c2f")
_DIRECTION_ALIASES = {
    "bidirectional": "bidirectional",
    "f2c": "f2c",
    "fine_to_coarse": "f2c",
    "c2f": "c2f",
    "coarse_to_fine": "c2f",
}
REDUCERS = ("se", "weighted")


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Space-to-depth: ``(B, r*H_c, r*W_c, C)`` -> ``(B, H_c, W_c, r*r, C)``.

    Children are ordered row-major inside each ``r x r`` neighbourhood.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"ratio must be a positive integer, got {r}")
    b, hf, wf, c = x.shape
    if hf % r or wf % r:
        raise ValueError(f"fine grid {hf}x{wf} is not an integer multiple of ratio {r}")
    x = x.reshape(b, hf // r, r, wf // r, r, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hf // r, wf // r, r * r, c)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle`."""
    b, hc, wc, rr, c = x.shape
    if rr != r * r:
        raise ValueError(f"expected {r * r} children per parent, got {rr}")
    x = x.reshape(b, hc, wc, r, r, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hc * r, wc * r, c)


def check_grids(f_rgb: torch.Tensor, f_hsi: torch.Tensor, r: int) -> None:
    if f_rgb.ndim != 4 or f_hsi.ndim != 5:
        raise ValueError("expected RGB (B,H,W,C) and HSI (B,H,W,K,C) features")
    b, hf, wf, c = f_rgb.shape
    bh, hc, wc, _, ch = f_hsi.shape
    if (b, c) != (bh, ch) or (hf, wf) != (r * hc, r * wc):
        raise ValueError(
            f"grid mismatch: RGB {tuple(f_rgb.shape)} vs HSI {tuple(f_hsi.shape)} at ratio {r}"
        )


class LocalCrossAttention(nn.Module):
    """Pre-norm multi-head cross-attention within each parent, residual + FFN on the query side.

    Queries are ``(..., Nq, C)`` and context ``(..., Nk, C)`` where the
    leading axes enumerate parents; softmax runs over the ``Nk`` context
    tokens of the same parent only.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, qkv_bias: bool = True):
        super().__init__()
        check_heads(dim, heads)
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.k = nn.Linear(dim, dim, bias=qkv_bias)
        self.v = nn.Linear(dim, dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.keep_weights = False
        self.last_weights: Optional[torch.Tensor] = None

    def attend(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Projected attention output (before the residual add)."""
        kv = self.norm_kv(context)
        q = split_heads(self.q(self.norm_q(queries)), self.heads)
        k = split_heads(self.k(kv), self.heads)
        v = split_heads(self.v(kv), self.heads)
        out, w = scaled_dot_attention(q, k, v)
        if self.keep_weights:
            self.last_weights = w.detach()
        return self.proj(merge_heads(out))

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.mlp(self.norm_ffn(x))


class FineToCoarse(LocalCrossAttention):
    """RGB children query the K HSI slices of their parent; updates the RGB map."""

    def forward(self, f_rgb: torch.Tensor, f_hsi: torch.Tensor, r: int) -> torch.Tensor:
        check_grids(f_rgb, f_hsi, r)
        o = self.attend(pixel_unshuffle(f_rgb, r), f_hsi)
        return self.ffn(f_rgb + pixel_shuffle(o, r))


class CoarseToFine(LocalCrossAttention):
    """The K HSI slices query the r*r RGB children of their parent; updates the HSI map."""

    def forward(self, f_hsi: torch.Tensor, f_rgb: torch.Tensor, r: int) -> torch.Tensor:
        check_grids(f_rgb, f_hsi, r)
        return self.ffn(f_hsi + self.attend(f_hsi, pixel_unshuffle(f_rgb, r)))


def se_hidden(dim: int) -> int:
    return max(dim // 8, 8)


class SpectralSEPool(nn.Module):
    """Collapse the slice axis with input-adaptive per-slice, per-channel gates.

    ``z`` is the spatial mean ``(B, K, C)``; gates ``a = sigmoid(f2(relu(f1(z))))``
    are broadcast over space and the gated slices are summed.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.f1 = nn.Linear(dim, se_hidden(dim))
        self.f2 = nn.Linear(se_hidden(dim), dim)
        self.last_gates: Optional[torch.Tensor] = None

    def gates(self, f_hsi: torch.Tensor) -> torch.Tensor:
        z = f_hsi.mean(dim=(1, 2))
        return torch.sigmoid(self.f2(torch.relu(self.f1(z))))

    def forward(self, f_hsi: torch.Tensor) -> torch.Tensor:
        a = self.gates(f_hsi)
        self.last_gates = a.detach()
        return (a[:, None, None] * f_hsi).sum(dim=3)


class WeightedSliceReducer(nn.Module):
    """Ablation reducer: one global learnable weight per slice, shared across channels."""

    def __init__(self, k: int):
        super().__init__()
        self.weights = nn.Parameter(torch.full((k,), 1.0 / k))

    def forward(self, f_hsi: torch.Tensor) -> torch.Tensor:
        return (f_hsi * self.weights[:, None]).sum(dim=3)


def make_reducer(kind: str, dim: int, k: int) -> nn.Module:
    if kind == "se":
        return SpectralSEPool(dim)
    if kind == "weighted":
        return WeightedSliceReducer(k)
    raise ValueError(f"unknown spectral reducer {kind!r}; choose from {REDUCERS}")


def upsample_nearest(x: torch.Tensor, r: int) -> torch.Tensor:
    """Nearest-neighbour ``r``-fold upsampling of a channels-last map ``(B, H, W, C)``."""
    if r == 1:
        return x
    return x.repeat_interleave(r, dim=1).repeat_interleave(r, dim=2)


class GatedModalityFusion(nn.Module):
    """``LN(LN(F_rgb) + sigmoid(alpha) * LN(up_r(F_hsi_pooled)))`` with a per-channel gate."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm_rgb = nn.LayerNorm(dim)
        self.norm_hsi = nn.LayerNorm(dim)
        self.norm_out = nn.LayerNorm(dim)
        self.alpha = nn.Parameter(torch.zeros(dim))

    def forward(self, f_rgb: torch.Tensor, f_hsi_pooled: torch.Tensor, r: int) -> torch.Tensor:
        up = upsample_nearest(f_hsi_pooled, r)
        if up.shape != f_rgb.shape:
            raise ValueError(f"upsampled HSI {tuple(up.shape)} does not match RGB {tuple(f_rgb.shape)}")
        return self.norm_out(self.norm_rgb(f_rgb) + torch.sigmoid(self.alpha) * self.norm_hsi(up))


@dataclass(frozen=True)
class FusionPlan:
    """Which stages (1-based) fuse, and in which direction."""

    active_stages: tuple = (1, 2, 3, 4)
    direction: str = "bidirectional"

    def __post_init__(self):
        stages = tuple(sorted(set(int(s) for s in self.active_stages)))
        if not stages:
            raise ValueError("fusion plan needs at least one active stage")
        if any(s < 1 for s in stages):
            raise ValueError(f"stages are 1-based, got {stages}")
        if self.direction not in _DIRECTION_ALIASES:
            raise ValueError(f"unknown direction {self.direction!r}; choose from {DIRECTIONS}")
        object.__setattr__(self, "active_stages", stages)
        object.__setattr__(self, "direction", _DIRECTION_ALIASES[self.direction])

    def is_active(self, stage: int) -> bool:
        return stage in self.active_stages

    def to_json(self) -> dict:
        return {"stages": list(self.active_stages), "direction": self.direction}

    @classmethod
    def from_json(cls, d: dict) -> "FusionPlan":
        return cls(tuple(d["stages"]), d.get("direction", "bidirectional"))


class BCAFStage(nn.Module):
    """One fusion block: cross-attention in the planned direction(s), spectral pooling, gated fusion.

    In the bidirectional case both updates read the stage's incoming features,
    so the two directions are independent of their evaluation order.
    """

    def __init__(self, dim: int, heads: int, k: int, direction: str = "bidirectional",
                 reducer: str = "se", mlp_ratio: float = 4.0):
        super().__init__()
        direction = _DIRECTION_ALIASES[direction]
        self.direction = direction
        self.f2c = FineToCoarse(dim, heads, mlp_ratio) if direction in ("bidirectional", "f2c") else None
        self.c2f = CoarseToFine(dim, heads, mlp_ratio) if direction in ("bidirectional", "c2f") else None
        self.reducer = make_reducer(reducer, dim, k)
        self.gate = GatedModalityFusion(dim)
        init_trunc_normal(self)

    def forward(self, f_rgb: torch.Tensor, f_hsi: torch.Tensor, r: int):
        check_grids(f_rgb, f_hsi, r)
        new_rgb = self.f2c(f_rgb, f_hsi, r) if self.f2c is not None else f_rgb
        new_hsi = self.c2f(f_hsi, f_rgb, r) if self.c2f is not None else f_hsi
        fused = self.gate(new_rgb, self.reducer(new_hsi), r)
        return fused, new_rgb, new_hsi
