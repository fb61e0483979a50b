"""Shared detection head: classification, margins, center-ness and semantic center offsets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import HeadConfig
from .errors import ShapeError
from .layers import conv_norm_relu

# exp() argument cap for margin decoding; keeps distances finite early in training
MAX_LOG_DISTANCE = 20.0


@dataclass
class HeadOutputs:
    cls_logits: torch.Tensor  # N x C x H x W
    reg_raw: torch.Tensor  # N x 4 x H x W, (l, t, r, b) before exp
    centerness_logit: torch.Tensor  # N x 1 x H x W
    semantic_raw: torch.Tensor  # N x 2 x H x W
    stride: int
    scale: torch.Tensor  # learnable per-level regression scale

    def distances(self) -> torch.Tensor:
        """Strictly positive (l, t, r, b) margins in pixels."""
        return torch.exp(torch.clamp(self.scale * self.reg_raw, max=MAX_LOG_DISTANCE)) * self.stride

    def offsets(self) -> torch.Tensor:
        return semantic_offsets(self.semantic_raw, self.stride)


def semantic_offsets(raw: torch.Tensor, stride: float) -> torch.Tensor:
    """Map raw semantic-center outputs to pixel offsets in (-stride, +stride)."""
    return (2.0 * torch.sigmoid(raw) - 1.0) * stride


class DetectorHead(nn.Module):
    def __init__(self, in_channels: int = 256, cfg: HeadConfig | None = None, num_levels: int = 4):
        super().__init__()
        cfg = cfg or HeadConfig()
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        self.cls_tower = nn.Sequential(*[conv_norm_relu(in_channels, in_channels) for _ in range(cfg.tower_depth)])
        self.reg_tower = nn.Sequential(*[conv_norm_relu(in_channels, in_channels) for _ in range(cfg.tower_depth)])
        self.cls_out = nn.Conv2d(in_channels, cfg.num_classes, 3, padding=1)
        self.reg_out = nn.Conv2d(in_channels, 4, 3, padding=1)
        self.centerness_out = nn.Conv2d(in_channels, 1, 3, padding=1)
        self.semantic_out = nn.Conv2d(in_channels, 2, 3, padding=1)
        self.scales = nn.Parameter(torch.ones(num_levels))

    def prior_bias(self) -> float:
        p = self.cfg.prior_prob
        return -math.log((1 - p) / p)

    def forward(self, x: torch.Tensor, level_index: int, stride: int) -> HeadOutputs:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"head expects {self.in_channels} channels, got {x.shape[1]}")
        c = self.cls_tower(x)
        r = self.reg_tower(x)
        return HeadOutputs(
            cls_logits=self.cls_out(c),
            reg_raw=self.reg_out(r),
            centerness_logit=self.centerness_out(r),
            semantic_raw=self.semantic_out(r),
            stride=stride,
            scale=self.scales[level_index],
        )

    def shared_parameter_count(self) -> int:
        return sum(p.numel() for n, p in self.named_parameters() if n != "scales")


def head_forward(x: torch.Tensor, params: DetectorHead, level_index: int, stride: int) -> HeadOutputs:
    return params(x, level_index, stride)
