"""Shared encoder-decoder with attention, applied with one weight set to every level."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionVariant, build_attention
from .backbone import Pyramid
from .config import SedamConfig
from .errors import ShapeError
from .layers import gated_norm

NUM_BLOCKS = 3
MIN_EXTENT = 2**NUM_BLOCKS


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: SedamConfig):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)
        self.norm = gated_norm(cout)
        self.attention = build_attention(cfg.attention, cout, cfg.reduction, cfg.spatial_kernel, cfg.shared_mlp)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.relu(self.norm(self.proj(x)))
        return self.attention(x)


class SEDAM(nn.Module):
    def __init__(self, in_channels: int = 256, cfg: SedamConfig | None = None):
        super().__init__()
        cfg = cfg or SedamConfig()
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        self.variant = AttentionVariant(cfg.attention)
        w = cfg.width
        enc = []
        for i in range(NUM_BLOCKS):
            enc.append(
                nn.Sequential(
                    nn.Conv2d(in_channels if i == 0 else w, w, 3, stride=2, padding=1),
                    gated_norm(w),
                    nn.ReLU(),
                )
            )
        self.encoder = nn.ModuleList(enc)
        self.smooth = nn.Conv2d(w, w, 3, padding=1)
        self.decoder = nn.ModuleList(
            DecoderBlock(w, in_channels if i == NUM_BLOCKS - 1 else w, cfg) for i in range(NUM_BLOCKS)
        )
        self.fuse = nn.Conv2d(2 * in_channels, in_channels, 1) if cfg.fusion == "concat_project" else None

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % MIN_EXTENT or w % MIN_EXTENT:
            raise ShapeError(f"encoder input {h}x{w} is not divisible by {MIN_EXTENT}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects {self.in_channels} channels, got {x.shape[1]}")
        for block in self.encoder:
            x = block(x)
        return self.smooth(x)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[1] != self.cfg.width:
            raise ShapeError(f"decoder expects a {self.cfg.width}-channel latent, got {latent.shape[1]}")
        for block in self.decoder:
            latent = block(latent)
        return latent

    def enhance(self, x: torch.Tensor) -> torch.Tensor:
        """Fused output for one level: ``x + decode(encode(x))`` by default."""
        y = self.decode(self.encode(x))
        if self.fuse is None:
            return x + y
        return self.fuse(torch.cat([x, y], dim=1))

    def forward(self, pyr: Pyramid) -> Pyramid:
        out = []
        for i, x in enumerate(pyr.levels):
            if x.shape[1] != self.in_channels:
                raise ShapeError(f"level {i} has {x.shape[1]} channels, expected {self.in_channels}")
            h, w = x.shape[-2:]
            if h < MIN_EXTENT or w < MIN_EXTENT:
                # too coarse for three halvings: identity branch
                out.append(x)
                continue
            if h % MIN_EXTENT or w % MIN_EXTENT:
                raise ShapeError(f"level {i} extent {h}x{w} is not divisible by {MIN_EXTENT}")
            out.append(self.enhance(x))
        return Pyramid(out, pyr.strides)


def encode(x: torch.Tensor, params: SEDAM) -> torch.Tensor:
    return params.encode(x)


def decode(latent: torch.Tensor, params: SEDAM) -> torch.Tensor:
    return params.decode(latent)


def sedam_apply(pyr: Pyramid, params: SEDAM) -> Pyramid:
    return params(pyr)
