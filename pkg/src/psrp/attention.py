"""Channel and spatial attention variants compared in the ablation.

``none`` is the identity, ``channel_only`` gates channels from fused
average- and max-pooled descriptors, ``cbam`` cascades an average-pooled
channel gate with a spatial gate over (avg, max) channel statistics, and
``cbam_min`` adds a min-pooled plane to that spatial gate.
"""
from __future__ import annotations

from enum import Enum

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

POOL_ORDER = ("avg", "max", "min")


class AttentionVariant(str, Enum):
    NONE = "none"
    CBAM = "cbam"
    CBAM_MIN = "cbam_min"
    CHANNEL_ONLY = "channel_only"


# ablation method letter for each variant
METHOD_OF = {
    AttentionVariant.NONE: "A",
    AttentionVariant.CBAM: "B",
    AttentionVariant.CBAM_MIN: "C",
    AttentionVariant.CHANNEL_ONLY: "OURS",
}


def pool_global(x: torch.Tensor, mode: str) -> torch.Tensor:
    """Per-channel spatial statistic: N x C x H x W -> N x C."""
    if x.numel() == 0:
        raise ShapeError("cannot pool an empty feature map")
    flat = x.flatten(2)
    if mode == "avg":
        return flat.mean(dim=2)
    if mode == "max":
        return flat.amax(dim=2)
    if mode == "min":
        return flat.amin(dim=2)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def pool_across_channels(x: torch.Tensor, modes) -> torch.Tensor:
    """Stack channel-axis statistics as planes, in (avg, max, min) order: N x |modes| x H x W."""
    modes = set(modes)
    if not modes:
        raise ConfigError("pool_across_channels needs at least one mode")
    unknown = modes - set(POOL_ORDER)
    if unknown:
        raise ConfigError(f"unknown pooling modes {sorted(unknown)}")
    planes = []
    for m in POOL_ORDER:
        if m not in modes:
            continue
        if m == "avg":
            planes.append(x.mean(dim=1, keepdim=True))
        elif m == "max":
            planes.append(x.amax(dim=1, keepdim=True))
        else:
            planes.append(x.amin(dim=1, keepdim=True))
    return torch.cat(planes, dim=1)


class Bottleneck(nn.Module):
    """C -> C/r -> C fully connected bottleneck."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"reduction ratio {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(v)))


class ChannelAttention(nn.Module):
    """Sigmoid of summed avg- and max-pooled MLP paths, scaling each channel."""

    def __init__(self, channels: int, reduction: int = 16, shared_mlp: bool = True):
        super().__init__()
        self.channels = channels
        self.mlp_avg = Bottleneck(channels, reduction)
        self.mlp_max = self.mlp_avg if shared_mlp else Bottleneck(channels, reduction)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"channel attention built for {self.channels} channels, got {x.shape[1]}")
        z = self.mlp_avg(pool_global(x, "avg")) + self.mlp_max(pool_global(x, "max"))
        return torch.sigmoid(z)[:, :, None, None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class CBAM(nn.Module):
    """Average-pooled channel gate followed by a k x k spatial gate."""

    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7, min_pool: bool = False):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError("spatial attention kernel size must be odd")
        self.channels = channels
        self.mlp = Bottleneck(channels, reduction)
        self.modes = ("avg", "max", "min") if min_pool else ("avg", "max")
        self.spatial = nn.Conv2d(len(self.modes), 1, kernel_size, padding=kernel_size // 2)

    def gates(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Channel gate (N x C x 1 x 1) and spatial gate (N x 1 x H x W)."""
        if x.shape[1] != self.channels:
            raise ShapeError(f"CBAM built for {self.channels} channels, got {x.shape[1]}")
        g_c = torch.sigmoid(self.mlp(pool_global(x, "avg")))[:, :, None, None]
        g_s = torch.sigmoid(self.spatial(pool_across_channels(x * g_c, self.modes)))
        return g_c, g_s

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g_c, g_s = self.gates(x)
        return x * g_c * g_s


def build_attention(variant, channels: int, reduction: int = 16, kernel_size: int = 7, shared_mlp: bool = True) -> nn.Module:
    variant = AttentionVariant(variant)
    if variant is AttentionVariant.NONE:
        return nn.Identity()
    if variant is AttentionVariant.CHANNEL_ONLY:
        return ChannelAttention(channels, reduction, shared_mlp)
    return CBAM(channels, reduction, kernel_size, min_pool=variant is AttentionVariant.CBAM_MIN)


def channel_attention_ours(x: torch.Tensor, params: ChannelAttention) -> torch.Tensor:
    return params(x)


def cbam(x: torch.Tensor, params: CBAM, min_pool: bool) -> torch.Tensor:
    if min_pool != ("min" in params.modes):
        raise ConfigError("CBAM parameters were built for a different min_pool setting")
    return params(x)


def apply_attention(x: torch.Tensor, variant, params: nn.Module | None) -> torch.Tensor:
    """Dispatch on ``variant``; raises if ``params`` were built for another variant."""
    variant = AttentionVariant(variant)
    if variant is AttentionVariant.NONE:
        if params is not None and not isinstance(params, nn.Identity):
            raise ConfigError("variant none takes no attention parameters")
        return x
    if variant is AttentionVariant.CHANNEL_ONLY:
        if not isinstance(params, ChannelAttention):
            raise ConfigError("channel_only requires ChannelAttention parameters")
        return channel_attention_ours(x, params)
    if not isinstance(params, CBAM):
        raise ConfigError(f"{variant.value} requires CBAM parameters")
    return cbam(x, params, min_pool=variant is AttentionVariant.CBAM_MIN)
