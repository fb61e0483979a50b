"""Small building blocks shared by the backbone, SEDAM and the head."""
from __future__ import annotations

import math

import torch.nn as nn

GN_GROUPS = 32


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(GN_GROUPS, channels), channels, eps=1e-5)


def gated_norm(channels: int) -> nn.Module:
    """Group norm where the conv is wider than 32 channels, identity otherwise."""
    return nn.GroupNorm(GN_GROUPS, channels, eps=1e-5) if channels > GN_GROUPS else nn.Identity()


def conv_norm_relu(cin: int, cout: int, kernel: int = 3, stride: int = 1, always_norm: bool = False) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2),
        group_norm(cout) if always_norm else gated_norm(cout),
        nn.ReLU(inplace=False),
    )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
