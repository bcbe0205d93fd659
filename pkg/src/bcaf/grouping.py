"""Spectral band grouping and grouped 3D patch embedding."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ArrayLike = Union[np.ndarray, torch.Tensor]

SHARING_MODES = ("shared", "unshared", "single_projection")


@dataclass(frozen=True)
class SpectralGrouping:
    """How ``S`` raw bands are split into ``K`` contiguous groups of ``R_G`` bands.

    ``S_pad`` is the smallest multiple of ``K`` not below ``S``; the extra
    bands are zeros appended after the last raw band.
    """

    S: int
    K: int
    S_pad: int
    R_G: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SpectralGrouping":
        g = cls(int(d["S"]), int(d["K"]), int(d["S_pad"]), int(d["R_G"]))
        if g != compute_grouping(g.S, g.K):
            raise ValueError(f"inconsistent grouping record {d}")
        return g


def compute_grouping(S: int, K: int) -> SpectralGrouping:
    """Zero-pad ``S`` bands up to the next multiple of ``K``.

    >>> compute_grouping(224, 5)
    SpectralGrouping(S=224, K=5, S_pad=225, R_G=45)
    """
    S, K = int(S), int(K)
    if S < 1 or K < 1:
        raise ValueError(f"band count and slice count must be >= 1, got S={S}, K={K}")
    if K > S:
        raise ValueError(f"more slices than bands: K={K} > S={S}")
    s_pad = -(-S // K) * K
    return SpectralGrouping(S=S, K=K, S_pad=s_pad, R_G=s_pad // K)


def pad_bands(cube: ArrayLike, g: SpectralGrouping) -> ArrayLike:
    """Append ``S_pad - S`` zero bands on the last axis of a channels-last cube."""
    if cube.shape[-1] != g.S:
        raise ValueError(f"cube has {cube.shape[-1]} bands, grouping expects S={g.S}")
    extra = g.S_pad - g.S
    if extra == 0:
        return cube
    if isinstance(cube, torch.Tensor):
        return F.pad(cube, (0, extra))
    pad = [(0, 0)] * (cube.ndim - 1) + [(0, extra)]
    return np.pad(cube, pad)


class GroupedPatchEmbed(nn.Module):
    """Project every ``patch x patch x R_G`` sub-cube to one ``C``-dim token.

    Input is a channels-last batch ``(B, H_c, W_c, S)`` with raw bands; padding
    to ``S_pad`` happens here. Output is ``(B, H_c/p, W_c/p, K, C)``.

    ``sharing_mode``:
        * ``shared``: one ``R_G -> C`` kernel applied to every group.
        * ``unshared``: ``K`` independent kernels of the same shape.
        * ``single_projection``: one kernel over all ``S_pad`` bands emitting
          ``K*C`` channels, read back as ``K`` slices in group order.
    """

    def __init__(self, grouping: SpectralGrouping, dim: int, patch_size: int = 4,
                 sharing_mode: str = "shared"):
        super().__init__()
        if sharing_mode not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode {sharing_mode!r}; choose from {SHARING_MODES}")
        self.grouping = grouping
        self.dim = dim
        self.patch_size = patch_size
        self.sharing_mode = sharing_mode
        g, p = grouping, patch_size
        if sharing_mode == "shared":
            self.proj = nn.Conv2d(g.R_G, dim, p, stride=p)
        elif sharing_mode == "unshared":
            self.proj = nn.Conv2d(g.S_pad, g.K * dim, p, stride=p, groups=g.K)
        else:
            self.proj = nn.Conv2d(g.S_pad, g.K * dim, p, stride=p)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def group_kernel(self, k: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Weights ``(C, R_G, p, p)`` and bias acting on group ``k`` (grouped modes)."""
        if self.sharing_mode == "shared":
            return self.proj.weight, self.proj.bias
        if self.sharing_mode == "unshared":
            sl = slice(k * self.dim, (k + 1) * self.dim)
            return self.proj.weight[sl], self.proj.bias[sl]
        raise ValueError("single_projection has no per-group kernel")

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        b, h, w, _ = cube.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(
                f"HSI spatial size {h}x{w} is not divisible by patch size {p}; "
                f"crop or pad the cube to a multiple of {p}"
            )
        g = self.grouping
        x = pad_bands(cube, g).permute(0, 3, 1, 2)
        if self.sharing_mode == "shared":
            x = x.reshape(b * g.K, g.R_G, h, w)
            y = self.proj(x).reshape(b, g.K, self.dim, h // p, w // p)
        else:
            y = self.proj(x).reshape(b, g.K, self.dim, h // p, w // p)
        return y.permute(0, 3, 4, 1, 2).contiguous()
