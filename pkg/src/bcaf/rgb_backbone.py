"""Hierarchical shifted-window attention encoder for the fine (RGB) grid.

All feature maps are channels-last: ``(B, H, W, C)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import DropPath, Mlp, check_heads, init_trunc_normal, merge_heads, scaled_dot_attention, split_heads


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    window_size: int = 7
    shift: int = 3
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    mlp_ratio: float = 4.0
    droppath_max: float = 0.3
    qkv_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have one entry per stage")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift {self.shift} must lie in [0, window_size)")
        for dim, h in zip(self.dims, self.heads):
            check_heads(dim, h)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def dims(self) -> tuple:
        return tuple(self.embed_dim * 2**i for i in range(len(self.depths)))

    @property
    def reduction(self) -> int:
        """Total downsampling factor of the deepest stage."""
        return self.patch_size * 2 ** (self.num_stages - 1)

    def droppath_rates(self) -> list[list[float]]:
        """Per-stage lists of stochastic depth rates, linear over the flattened block index."""
        total = sum(self.depths)
        flat = torch.linspace(0, self.droppath_max, total).tolist() if total > 1 else [0.0] * total
        out, i = [], 0
        for d in self.depths:
            out.append(flat[i:i + d])
            i += d
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["depths"], d["heads"] = list(self.depths), list(self.heads)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    @classmethod
    def swin_tiny(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)


def window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    """``(B, H, W, C)`` -> ``(B * nW, wh * ww, C)``; H, W must be multiples of the window."""
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, wh * ww, c)


def window_reverse(windows: torch.Tensor, wh: int, ww: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // wh, w // ww, wh, ww, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, h, w, c)


def effective_window(h: int, w: int, window: int, shift: int) -> tuple[int, int, int, int]:
    """Clamp the window to small grids; shifting is disabled along an axis that fits in one window."""
    wh, ww = min(window, h), min(window, w)
    sh = shift if h > window else 0
    sw = shift if w > window else 0
    return wh, ww, sh, sw


def shifted_window_mask(hp: int, wp: int, wh: int, ww: int, sh: int, sw: int,
                        device=None) -> Optional[torch.Tensor]:
    """Additive ``(nW, N, N)`` mask (0 / -inf) separating regions that the cyclic roll glued together."""
    if sh == 0 and sw == 0:
        return None
    img = torch.zeros(1, hp, wp, 1, device=device)
    cnt = 0
    hs = (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)) if sh else (slice(None),)
    ws = (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)) if sw else (slice(None),)
    for a in hs:
        for b in ws:
            img[:, a, b, :] = cnt
            cnt += 1
    ids = window_partition(img, wh, ww).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside (possibly shifted) windows with a relative position bias."""

    def __init__(self, dim: int, heads: int, window_size: int, qkv_bias: bool = True):
        super().__init__()
        check_heads(dim, heads)
        self.dim, self.heads, self.window_size = dim, heads, window_size
        m = window_size
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * m - 1) ** 2, heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.keep_weights = False
        self.last_weights: Optional[torch.Tensor] = None

    def relative_bias(self, wh: int, ww: int) -> torch.Tensor:
        """``(heads, wh*ww, wh*ww)`` bias for an effective window of ``wh x ww``."""
        m = self.window_size
        coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        idx = (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)
        idx = idx.to(self.relative_position_bias_table.device)
        return self.relative_position_bias_table[idx.reshape(-1)].view(wh * ww, wh * ww, -1).permute(2, 0, 1)

    def forward(self, windows: torch.Tensor, wh: int, ww: int,
                mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``windows``: ``(B * nW, N, C)``; ``mask``: ``(nW, N, N)`` or None."""
        bw, n, _ = windows.shape
        q, k, v = (split_heads(t, self.heads) for t in self.qkv(windows).chunk(3, dim=-1))
        bias = self.relative_bias(wh, ww).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            bias = (bias + mask.unsqueeze(1)).repeat(bw // nw, 1, 1, 1)
        out, w = scaled_dot_attention(q, k, v, bias)
        if self.keep_weights:
            self.last_weights = w.detach()
        return self.proj(merge_heads(out))


class SwinBlock(nn.Module):
    """Pre-norm window-attention sublayer followed by a pre-norm FFN sublayer."""

    def __init__(self, dim: int, heads: int, window_size: int, shift: int, mlp_ratio: float = 4.0,
                 drop_path: float = 0.0, qkv_bias: bool = True):
        super().__init__()
        self.window_size, self.shift = window_size, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window_size, qkv_bias)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """Window attention on ``(B, H, W, C)`` with padding, cyclic shift and masking."""
        _, h, w, c = x.shape
        wh, ww, sh, sw = effective_window(h, w, self.window_size, self.shift)
        ph, pw = (-h) % wh, (-w) % ww
        if ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw
        if sh or sw:
            x = torch.roll(x, shifts=(-sh, -sw), dims=(1, 2))
        mask = shifted_window_mask(hp, wp, wh, ww, sh, sw, device=x.device)
        if mask is not None:
            mask = mask.to(x.dtype)
        y = self.attn(window_partition(x, wh, ww), wh, ww, mask)
        y = window_reverse(y, wh, ww, hp, wp)
        if sh or sw:
            y = torch.roll(y, shifts=(sh, sw), dims=(1, 2))
        return y[:, :h, :w, :].contiguous()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.attend(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchMerging(nn.Module):
    """2x spatial downsampling: concatenate 2x2 neighbours (4C), LayerNorm, project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    @staticmethod
    def gather(x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-3], x.shape[-2]
        if h % 2 or w % 2:
            raise ValueError(f"patch merging needs even spatial dims, got {h}x{w}")
        x0 = x[..., 0::2, 0::2, :]
        x1 = x[..., 1::2, 0::2, :]
        x2 = x[..., 0::2, 1::2, :]
        x3 = x[..., 1::2, 1::2, :]
        return torch.cat([x0, x1, x2, x3], dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reduction(self.norm(self.gather(x)))


class SwinBackbone(nn.Module):
    """Four-stage Swin encoder on channels-last images ``(B, H, W, in_chans)``.

    ``forward`` returns the per-stage (output-normalised) features at
    1/4, 1/8, 1/16 and 1/32 resolution. The stage-wise methods ``embed``,
    ``run_stage`` and ``stage_output`` let the fusion model interleave
    cross-modal updates between stages.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), in_chans: int = 3):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        self.patch_embed = nn.Conv2d(in_chans, dims[0], cfg.patch_size, stride=cfg.patch_size)
        self.patch_norm = nn.LayerNorm(dims[0])
        rates = cfg.droppath_rates()
        self.downsamples = nn.ModuleList(
            [nn.Identity()] + [PatchMerging(dims[i - 1]) for i in range(1, cfg.num_stages)]
        )
        self.stages = nn.ModuleList()
        for i, (dim, depth, heads) in enumerate(zip(dims, cfg.depths, cfg.heads)):
            self.stages.append(nn.ModuleList([
                SwinBlock(dim, heads, cfg.window_size, 0 if j % 2 == 0 else cfg.shift,
                          cfg.mlp_ratio, rates[i][j], cfg.qkv_bias)
                for j in range(depth)
            ]))
        self.out_norms = nn.ModuleList([nn.LayerNorm(d) for d in dims])
        init_trunc_normal(self)

    def check_input(self, h: int, w: int) -> None:
        red = self.cfg.reduction
        if h % red or w % red:
            raise ValueError(
                f"input {h}x{w} must be divisible by {red}; pad by "
                f"({(-h) % red}, {(-w) % red}) pixels"
            )

    def embed(self, img: torch.Tensor) -> torch.Tensor:
        self.check_input(img.shape[1], img.shape[2])
        x = self.patch_embed(img.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return self.patch_norm(x)

    def run_stage(self, i: int, x: torch.Tensor) -> torch.Tensor:
        x = self.downsamples[i](x)
        for blk in self.stages[i]:
            x = blk(x)
        return x

    def stage_output(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return self.out_norms[i](x)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = self.embed(img)
        feats = []
        for i in range(self.cfg.num_stages):
            x = self.run_stage(i, x)
            feats.append(self.stage_output(i, x))
        return feats

    def load_weight_file(self, path, prefix: str = "", strict: bool = False) -> dict:
        """Import parameters from a checkpoint container (see :mod:`bcaf.training.checkpoint`).

        Tensors named ``prefix + <param name>`` are copied where shapes match.
        Returns ``{"loaded": [...], "skipped": [...]}``.
        """
        from .training.checkpoint import load_checkpoint, load_matching

        ckpt = load_checkpoint(path)
        return load_matching(self, ckpt.tensors, prefix=prefix, strict=strict)
