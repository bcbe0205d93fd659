"""HSI-adapted Swin encoder with factorised spatial / spectral attention.

Features are channels-last with an explicit slice axis: ``(B, H, W, K, C)``.
For ``K == 1`` the network is a plain 2D Swin on a ``4 x 4 x S -> C``
embedding (the HSI-1 configuration); the slice axis is kept with size 1 so
downstream code does not special-case it.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .grouping import GroupedPatchEmbed, SpectralGrouping
from .layers import DropPath, Mlp, MultiHeadSelfAttention, check_heads, init_trunc_normal
from .rgb_backbone import BackboneConfig, PatchMerging, SwinBlock

SPECTRAL_MODES = ("attention", "conv1d")

HSI_DEFAULT = BackboneConfig(depths=(3, 3, 9, 3))


def slices_to_batch(x: torch.Tensor) -> torch.Tensor:
    """``(B, H, W, K, C)`` -> ``(B*K, H, W, C)``."""
    b, h, w, k, c = x.shape
    return x.permute(0, 3, 1, 2, 4).reshape(b * k, h, w, c)


def batch_to_slices(x: torch.Tensor, k: int) -> torch.Tensor:
    bk, h, w, c = x.shape
    return x.reshape(bk // k, k, h, w, c).permute(0, 2, 3, 1, 4)


def per_slice_spatial_attention(block: SwinBlock, x: torch.Tensor) -> torch.Tensor:
    """Run one 2D window-attention block on every slice independently, same weights."""
    return batch_to_slices(block(slices_to_batch(x)), x.shape[3])


class SpectralPosEmbed(nn.Module):
    """Learnable ``K x C`` table added identically at every spatial location."""

    def __init__(self, k: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(k, dim))
        nn.init.trunc_normal_(self.table, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.table.shape[0]:
            raise ValueError(f"expected {self.table.shape[0]} slices, got {x.shape[-2]}")
        return x + self.table


class SpectralAttentionBlock(nn.Module):
    """Position-wise multi-head self-attention along the slice axis, then an FFN."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, drop_path: float = 0.0,
                 qkv_bias: bool = True):
        super().__init__()
        check_heads(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, qkv_bias)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] < 2:
            raise ValueError("spectral attention needs K >= 2; use the HSI-1 path for K = 1")
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class SpectralConv1d(nn.Module):
    """Zero-padded 1D convolution along the slice axis, ``C -> C`` channels."""

    def __init__(self, dim: int, kernel_width: int = 3):
        super().__init__()
        if kernel_width < 1 or kernel_width % 2 == 0:
            raise ValueError(f"config error: spectral conv kernel width must be odd, got {kernel_width}")
        self.conv = nn.Conv1d(dim, dim, kernel_width, padding=kernel_width // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, k, c = x.shape
        y = self.conv(x.reshape(-1, k, c).transpose(1, 2)).transpose(1, 2)
        return y.reshape(*lead, k, c)


class SpectralConvBlock(nn.Module):
    """Ablation stand-in for :class:`SpectralAttentionBlock` with a fixed local receptive field."""

    def __init__(self, dim: int, kernel_width: int = 3, mlp_ratio: float = 4.0, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.mix = SpectralConv1d(dim, kernel_width)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.mix(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class HSIBlock(nn.Module):
    """Per-slice spatial window attention followed by a spectral sublayer (skipped for K=1)."""

    def __init__(self, dim: int, heads: int, cfg: BackboneConfig, shift: int, drop_path: float,
                 spectral: bool, spectral_mode: str = "attention", spectral_kernel: int = 3):
        super().__init__()
        self.spatial = SwinBlock(dim, heads, cfg.window_size, shift, cfg.mlp_ratio, drop_path, cfg.qkv_bias)
        self.spectral: Optional[nn.Module] = None
        if spectral:
            if spectral_mode == "attention":
                self.spectral = SpectralAttentionBlock(dim, heads, cfg.mlp_ratio, drop_path, cfg.qkv_bias)
            else:
                self.spectral = SpectralConvBlock(dim, spectral_kernel, cfg.mlp_ratio, drop_path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = per_slice_spatial_attention(self.spatial, x)
        if self.spectral is not None:
            x = self.spectral(x)
        return x


class SpatialPatchMerging3d(PatchMerging):
    """2x2 spatial merging applied to each slice with shared weights; K is untouched."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = super().forward(x.permute(0, 3, 1, 2, 4))
        return y.permute(0, 2, 3, 1, 4)


class HSIBackbone(nn.Module):
    """Four-stage HSI encoder on channels-last cubes ``(B, H_c, W_c, S)``."""

    def __init__(self, grouping: SpectralGrouping, cfg: BackboneConfig = HSI_DEFAULT,
                 sharing_mode: str = "shared", spectral_mode: str = "attention", spectral_kernel: int = 3):
        super().__init__()
        if spectral_mode not in SPECTRAL_MODES:
            raise ValueError(f"unknown spectral mode {spectral_mode!r}; choose from {SPECTRAL_MODES}")
        self.cfg, self.grouping = cfg, grouping
        self.sharing_mode, self.spectral_mode = sharing_mode, spectral_mode
        dims = cfg.dims
        k = grouping.K
        self.patch_embed = GroupedPatchEmbed(grouping, dims[0], cfg.patch_size, sharing_mode)
        self.patch_norm = nn.LayerNorm(dims[0])
        self.pos_embed = SpectralPosEmbed(k, dims[0]) if k > 1 else None
        rates = cfg.droppath_rates()
        self.downsamples = nn.ModuleList(
            [nn.Identity()] + [SpatialPatchMerging3d(dims[i - 1]) for i in range(1, cfg.num_stages)]
        )
        self.stages = nn.ModuleList()
        for i, (dim, depth, heads) in enumerate(zip(dims, cfg.depths, cfg.heads)):
            self.stages.append(nn.ModuleList([
                HSIBlock(dim, heads, cfg, 0 if j % 2 == 0 else cfg.shift, rates[i][j],
                         spectral=k > 1, spectral_mode=spectral_mode, spectral_kernel=spectral_kernel)
                for j in range(depth)
            ]))
        self.out_norms = nn.ModuleList([nn.LayerNorm(d) for d in dims])
        init_trunc_normal(self)

    @property
    def K(self) -> int:
        return self.grouping.K

    def check_input(self, h: int, w: int) -> None:
        red = self.cfg.reduction
        if h % red or w % red:
            raise ValueError(
                f"HSI input {h}x{w} must be divisible by {red}; pad by "
                f"({(-h) % red}, {(-w) % red}) pixels"
            )

    def embed(self, cube: torch.Tensor) -> torch.Tensor:
        self.check_input(cube.shape[1], cube.shape[2])
        x = self.patch_norm(self.patch_embed(cube))
        if self.pos_embed is not None:
            x = self.pos_embed(x)
        return x

    def run_stage(self, i: int, x: torch.Tensor) -> torch.Tensor:
        x = self.downsamples[i](x)
        for blk in self.stages[i]:
            x = blk(x)
        return x

    def stage_output(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return self.out_norms[i](x)

    def forward(self, cube: torch.Tensor) -> list[torch.Tensor]:
        x = self.embed(cube)
        feats = []
        for i in range(self.cfg.num_stages):
            x = self.run_stage(i, x)
            feats.append(self.stage_output(i, x))
        return feats

    def load_from_rgb_state(self, state: dict[str, torch.Tensor]) -> dict:
        """Copy 2D Swin weights where names and shapes line up.

        RGB block ``stages.i.j.*`` maps onto this block's ``stages.i.j.spatial.*``;
        blocks beyond the RGB depth, the spectral sublayers and the grouped
        embedding keep their random init.
        """
        from .training.checkpoint import load_matching

        mapped = {}
        for name, t in state.items():
            parts = name.split(".")
            if parts[0] == "stages" and len(parts) > 3:
                name = ".".join(parts[:3] + ["spatial"] + parts[3:])
            mapped[name] = t
        return load_matching(self, mapped)
