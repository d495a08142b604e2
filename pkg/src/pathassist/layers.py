"""Small pre-norm transformer pieces shared by the towers, connector and LM.

Attention projections are named ``q_proj``/``k_proj``/``v_proj``/``o_proj`` so
adapters can target them by name.
"""
from __future__ import annotations

import math

import torch
from torch import nn


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, causal: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.causal = causal
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_padding_mask=None):
        # x: (B, Lq, D); context: (B, Lk, Dkv); key_padding_mask: (B, Lk), True = ignore
        context = x if context is None else context
        b, lq, d = x.shape
        lk = context.shape[1]
        h = self.heads
        q = self.q_proj(x).view(b, lq, h, d // h).transpose(1, 2)
        k = self.k_proj(context).view(b, lk, h, d // h).transpose(1, 2)
        v = self.v_proj(context).view(b, lk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if self.causal:
            future = torch.ones(lq, lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o_proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, causal=causal)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask=key_padding_mask)
        return x + self.mlp(self.norm2(x))


class CrossBlock(nn.Module):
    """Queries attend to a separate context sequence, then a feed-forward."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.attn = Attention(dim, heads, kv_dim=kv_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x, context, key_padding_mask=None):
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), key_padding_mask=key_padding_mask)
        return x + self.mlp(self.norm2(x))


def sincos_2d(rows: int, cols: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sine-cosine position table of shape ``(rows * cols, dim)``, row-major."""
    if dim % 4:
        raise ValueError("sincos_2d needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(rows, dtype=torch.float64), torch.arange(cols, dtype=torch.float64), indexing="ij"
    )
    ay = ys.reshape(-1, 1) * omega
    ax = xs.reshape(-1, 1) * omega
    return torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1).to(dtype)


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialise every parameter from a private generator (global RNG untouched)."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name and p.dim() == 1:
                p.fill_(1.0)
            elif p.dim() >= 2:
                fan_in = p.shape[-1]
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return module
