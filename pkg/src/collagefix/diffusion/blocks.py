"""Learned building blocks for the denoiser UNets."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(t.device)


class TimeEmbedMLP(nn.Module):
    """Two-layer MLP on top of the sinusoidal timestep embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        return self.net(timestep_embedding(t, self.dim).to(self.net[0].weight.dtype))


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    """Conv residual block with an additive timestep projection."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention over flattened spatial tokens."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm = _norm(channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, tokens, C) -> same shape, with a residual connection."""
        b, n, c = x.shape
        h = self.norm(x.transpose(1, 2)).transpose(1, 2)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        k = k.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        v = v.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return x + self.proj(out)


class CrossAttention(nn.Module):
    """Detail-transfer attention: queries from the synthesis tokens g, keys
    and values from reference features f, added residually:

        out = softmax(Q(g) K(f)^T / sqrt(d)) V(f) + g
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.channels = channels
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)

    def forward(self, g: Tensor, f: Tensor) -> Tensor:
        """g: (B, N, C), f: (B, M, C) -> (B, N, C)."""
        if g.shape[-1] != self.channels or f.shape[-1] != self.channels:
            raise ValueError(f"channel mismatch: g {g.shape[-1]}, f {f.shape[-1]}, "
                             f"block {self.channels}")
        b, n, c = g.shape
        m = f.shape[1]
        d = c // self.heads
        q = self.q(g).reshape(b, n, self.heads, d).transpose(1, 2)
        k = self.k(f).reshape(b, m, self.heads, d).transpose(1, 2)
        v = self.v(f).reshape(b, m, self.heads, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return out + g


def cross_attend(block: CrossAttention, g: Tensor, f: Tensor) -> Tensor:
    return block(g, f)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class GlobalReferenceEncoder(nn.Module):
    """Pooled single-token reference embedding (the CLIP-free surrogate used
    by the global-embedding ablation)."""

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        ch = embed_dim // 2
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, ch, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(ch, embed_dim, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.mlp = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU(),
                                 nn.Linear(embed_dim, embed_dim))

    def forward(self, image: Tensor) -> Tensor:
        """image: (B, C, H, W) -> one token per sample, (B, 1, embed_dim)."""
        h = self.net(image).mean(dim=(2, 3))
        return self.mlp(h).unsqueeze(1)
