"""Denoiser UNet with taps at its self-attention sites.

The same network class serves as the synthesizer (which injects reference
features by cross-attention right after each self-attention) and as the
detail extractor (which exposes the token matrices right before each
self-attention). Site order is fixed by the forward pass: bottleneck first,
then decoder stages coarse to fine, so the two roles line up stage by stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .blocks import (CrossAttention, Downsample, ResBlock, SelfAttention,
                     TimeEmbedMLP, Upsample, _norm)


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    in_channels: int = 7  # [x_t or I_t (3), conditioning image (3), mask (1)]
    out_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    attn_stages: tuple[int, ...] = (1, 2)  # stage indices with attention sites
    num_heads: int = 4
    time_embed_dim: int = 128

    def stage_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def stage_resolutions(self) -> list[int]:
        return [self.resolution // (2 ** s) for s in range(len(self.channel_mults))]

    def attention_sites(self) -> list[tuple[str, int]]:
        """(phase, stage) for every attention site, in forward-pass order."""
        last = len(self.channel_mults) - 1
        sites = [("mid", last)]
        for s in sorted(self.attn_stages, reverse=True):
            sites.append(("dec", s))
        return sites

    def site_shapes(self) -> list[tuple[int, int]]:
        """(tokens, channels) per attention site, matching attention_sites()."""
        chans = self.stage_channels()
        res = self.stage_resolutions()
        return [(res[s] * res[s], chans[s]) for _, s in self.attention_sites()]

    def to_dict(self) -> dict:
        return {"resolution": self.resolution, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "base_channels": self.base_channels,
                "channel_mults": list(self.channel_mults),
                "num_res_blocks": self.num_res_blocks,
                "attn_stages": list(self.attn_stages), "num_heads": self.num_heads,
                "time_embed_dim": self.time_embed_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        d["attn_stages"] = tuple(d["attn_stages"])
        return cls(**d)


@dataclass
class FeatureStack:
    """Per-site token matrices captured before the detail net's self-attention."""

    features: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.features)

    def shapes(self) -> list[tuple[int, int]]:
        return [(f.shape[1], f.shape[2]) for f in self.features]

    def detach(self) -> "FeatureStack":
        return FeatureStack([f.detach() for f in self.features])


class AttentionSite(nn.Module):
    """Self-attention plus the cross-attention injection point after it."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.self_attn = SelfAttention(channels, heads)
        self.cross_attn = CrossAttention(channels, heads)

    def forward(self, x: Tensor, feature: Tensor | None,
                captured: list[Tensor] | None) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)
        if captured is not None:
            captured.append(tokens)
        tokens = self.self_attn(tokens)
        if feature is not None:
            tokens = self.cross_attn(tokens, feature)
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class DenoiserUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.stage_channels()
        n_stages = len(chans)
        self.time_mlp = TimeEmbedMLP(config.time_embed_dim)
        self.stem = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        skip_chans = [chans[0]]
        ch = chans[0]
        for s in range(n_stages):
            stage = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                stage.append(ResBlock(ch, chans[s], config.time_embed_dim))
                ch = chans[s]
                skip_chans.append(ch)
            self.enc_blocks.append(stage)
            if s < n_stages - 1:
                self.downs.append(Downsample(ch))
                skip_chans.append(ch)

        self.mid1 = ResBlock(ch, ch, config.time_embed_dim)
        self.mid_site = AttentionSite(ch, config.num_heads)
        self.mid2 = ResBlock(ch, ch, config.time_embed_dim)

        self.dec_blocks = nn.ModuleList()
        self.dec_sites = nn.ModuleDict()
        self.ups = nn.ModuleList()
        for s in reversed(range(n_stages)):
            stage = nn.ModuleList()
            for _ in range(config.num_res_blocks + 1):
                stage.append(ResBlock(ch + skip_chans.pop(), chans[s], config.time_embed_dim))
                ch = chans[s]
            self.dec_blocks.append(stage)
            if s in config.attn_stages:
                self.dec_sites[str(s)] = AttentionSite(ch, config.num_heads)
            if s > 0:
                self.ups.append(Upsample(ch))

        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, config.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: Tensor, t: Tensor, features: FeatureStack | None = None,
                capture: bool = False) -> tuple[Tensor, FeatureStack | None]:
        """Predict noise; optionally consume or capture attention-site tokens.

        `features`, when given, must follow attention_sites() order; `capture`
        records the pre-self-attention tokens in that same order.
        """
        config = self.config
        sites = config.attention_sites()
        if features is not None and len(features) != len(sites):
            raise ValueError(f"expected {len(sites)} feature stages, got {len(features)}")
        captured: list[Tensor] | None = [] if capture else None
        site_idx = 0

        def site_feature():
            return None if features is None else features.features[site_idx]

        temb = self.time_mlp(t)
        h = self.stem(x)
        skips = [h]
        n_stages = len(config.channel_mults)
        for s in range(n_stages):
            for block in self.enc_blocks[s]:
                h = block(h, temb)
                skips.append(h)
            if s < n_stages - 1:
                h = self.downs[s](h)
                skips.append(h)

        h = self.mid1(h, temb)
        h = self.mid_site(h, site_feature(), captured)
        site_idx += 1
        h = self.mid2(h, temb)

        for i, s in enumerate(reversed(range(n_stages))):
            for block in self.dec_blocks[i]:
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if str(s) in self.dec_sites:
                h = self.dec_sites[str(s)](h, site_feature(), captured)
                site_idx += 1
            if s > 0:
                h = self.ups[i](h)

        out = self.out_conv(nn.functional.silu(self.out_norm(h)))
        return out, (FeatureStack(captured) if capture else None)
