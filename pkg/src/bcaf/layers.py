"""Small building blocks shared by the backbones, fusion and decoder."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn


def init_trunc_normal(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal init for linear/conv weights, zero bias, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv1d)):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm) and m.elementwise_affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class DropPath(nn.Module):
    """Stochastic depth on the residual branch, one Bernoulli draw per sample."""

    def __init__(self, drop_prob: float = 0.0):
        super().__init__()
        self.drop_prob = float(drop_prob)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.drop_prob == 0.0 or not self.training:
            return x
        keep = 1.0 - self.drop_prob
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = x.new_empty(shape).bernoulli_(keep)
        return x * mask / keep

    def extra_repr(self) -> str:
        return f"drop_prob={self.drop_prob:.3f}"


class Mlp(nn.Module):
    """Position-wise two-layer FFN with GELU."""

    def __init__(self, dim: int, hidden: Optional[int] = None, drop: float = 0.0):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(self.drop(self.act(self.fc1(x)))))


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax attention over the key axis.

    Args:
        q: ``(..., Nq, d)`` queries.
        k: ``(..., Nk, d)`` keys.
        v: ``(..., Nk, dv)`` values.
        bias: optional additive score bias broadcastable to ``(..., Nq, Nk)``;
            ``-inf`` entries remove a key entirely.

    Returns:
        ``(out, weights)`` with ``out`` of shape ``(..., Nq, dv)`` and the
        post-softmax ``weights`` of shape ``(..., Nq, Nk)``.
    """
    # head-split views are strided; CPU bmm on many tiny strided matrices hits slow, shape-erratic paths
    scores = (q * q.shape[-1] ** -0.5) @ k.contiguous().transpose(-2, -1)
    if bias is not None:
        scores = scores + bias
    weights = scores.softmax(dim=-1)
    return weights @ v.contiguous(), weights


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """``(..., N, C)`` -> ``(..., heads, N, C // heads)``."""
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def check_heads(dim: int, heads: int) -> None:
    if heads < 1 or dim % heads != 0:
        raise ValueError(f"config error: {heads} heads do not divide channel width {dim}")


class MultiHeadSelfAttention(nn.Module):
    """Dense multi-head self-attention over the second-to-last axis.

    Used for position-wise spectral attention, where the token axis is the K
    slices at one spatial location.
    """

    def __init__(self, dim: int, heads: int, qkv_bias: bool = True):
        super().__init__()
        check_heads(dim, heads)
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.last_weights: Optional[torch.Tensor] = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out, w = scaled_dot_attention(
            split_heads(q, self.heads), split_heads(k, self.heads), split_heads(v, self.heads)
        )
        if self.keep_weights:
            self.last_weights = w.detach()
        return self.proj(merge_heads(out))
