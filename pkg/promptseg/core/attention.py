"""
Scaled dot-product attention shared by the text encoder and the text
refinement decoder. No fused kernels: results must be bit-stable across runs
and in double precision.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def attend(query: Tensor, key: Tensor, value: Tensor, num_heads: int = 1) -> Tensor:
    """
    Multi-head scaled dot-product attention over the second-to-last axis.

    :param query: Tensor of shape ``(..., Lq, C)``.
    :type query: Tensor
    :param key: Tensor of shape ``(..., Lk, C)``.
    :type key: Tensor
    :param value: Tensor of shape ``(..., Lk, C)``.
    :type value: Tensor
    :param num_heads: Number of heads; must divide ``C``.
    :type num_heads: int
    :return: Tensor of shape ``(..., Lq, C)``.
    :rtype: Tensor
    """
    *lead, lq, width = query.shape
    lk = key.shape[-2]
    head_dim = width // num_heads

    q = query.reshape(*lead, lq, num_heads, head_dim).transpose(-3, -2)
    k = key.reshape(*lead, lk, num_heads, head_dim).transpose(-3, -2)
    v = value.reshape(*lead, lk, num_heads, head_dim).transpose(-3, -2)

    weights = F.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
    out = (weights @ v).transpose(-3, -2)
    return out.reshape(*lead, lq, width)


class MultiHeadAttention(nn.Module):
    """
    Attention with separate query/key/value/output projections.

    :param width: Token width ``C``.
    :type width: int
    :param num_heads: Number of heads.
    :type num_heads: int
    :param kv_width: Width of the key/value source, if different from ``C``.
    :type kv_width: int | None
    """
    def __init__(self, width: int, num_heads: int = 1, kv_width: int | None = None) -> None:
        super().__init__()
        if width % num_heads != 0:
            raise ValueError(f"width {width} is not divisible by num_heads {num_heads}")
        kv_width = width if kv_width is None else kv_width
        self.num_heads = num_heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(kv_width, width)
        self.v_proj = nn.Linear(kv_width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, query: Tensor, memory: Tensor) -> Tensor:
        out = attend(self.q_proj(query), self.k_proj(memory), self.v_proj(memory),
                     self.num_heads)
        return self.out_proj(out)


class SelfAttentionBlock(nn.Module):
    """
    Pre-norm transformer encoder block: attention then a two-layer MLP, each
    wrapped in a residual connection.
    """
    def __init__(self, width: int, num_heads: int = 4, mlp_ratio: int = 2) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, num_heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))
