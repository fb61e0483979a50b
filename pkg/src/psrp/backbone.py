"""Basis feature pyramid: four levels at strides 4/8/16/32, projected to a uniform width."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .config import BackboneConfig
from .errors import ConfigError, ShapeError
from .layers import conv_norm_relu

STRIDES = (4, 8, 16, 32)


@dataclass
class Pyramid:
    """Per-level N x C x H x W tensors with their strides, finest level first."""

    levels: list[torch.Tensor]
    strides: tuple[int, ...] = STRIDES

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def check_input_size(images: torch.Tensor, multiple: int = 32) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected an N x 3 x H x W batch, got shape {tuple(images.shape)}")
    for name, size in (("height", images.shape[2]), ("width", images.shape[3])):
        if size % multiple:
            raise ShapeError(f"input {name} {size} is not divisible by {multiple}")


class TinyBackbone(nn.Module):
    """Stride-2 stem, then four stages of two conv-GN-ReLU blocks (the first strided)."""

    def __init__(self, base_width: int = 16, out_channels: int = 256):
        super().__init__()
        self.widths = tuple(base_width * 2**i for i in range(4))
        self.stem = conv_norm_relu(3, base_width, stride=2, always_norm=True)
        stages, cin = [], base_width
        for w in self.widths:
            stages.append(nn.Sequential(conv_norm_relu(cin, w, stride=2, always_norm=True), conv_norm_relu(w, w, always_norm=True)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(nn.Conv2d(w, out_channels, 1) for w in self.widths)
        self.out_channels = out_channels

    def stage_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(images)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, images: torch.Tensor) -> Pyramid:
        check_input_size(images)
        return Pyramid([lat(c) for lat, c in zip(self.lateral, self.stage_outputs(images))])


class ResNet50Adapter(nn.Module):
    """Lateral projections over externally computed C2-C5 stage outputs.

    ``stage_source`` maps an image batch to the four stage tensors
    (strides 4, 8, 16, 32), e.g. a wrapped pretrained ResNet-50.
    """

    def __init__(
        self,
        stage_source: Callable[[torch.Tensor], Sequence[torch.Tensor]] | None = None,
        out_channels: int = 256,
        in_channels: Sequence[int] = (256, 512, 1024, 2048),
    ):
        super().__init__()
        if stage_source is None:
            raise ConfigError("resnet50-adapter: weights required (pass a stage_source producing C2-C5)")
        self.stage_source = stage_source
        if isinstance(stage_source, nn.Module):
            self.source = stage_source
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.out_channels = out_channels

    def forward(self, images: torch.Tensor) -> Pyramid:
        check_input_size(images)
        stages = list(self.stage_source(images))
        if len(stages) != 4:
            raise ShapeError(f"stage source returned {len(stages)} tensors, expected 4")
        for s, feat in zip(STRIDES, stages):
            expect = (images.shape[2] // s, images.shape[3] // s)
            if tuple(feat.shape[2:]) != expect:
                raise ShapeError(f"stride-{s} stage has spatial size {tuple(feat.shape[2:])}, expected {expect}")
        return Pyramid([lat(c) for lat, c in zip(self.lateral, stages)])


def build_backbone(cfg: BackboneConfig, stage_source=None) -> nn.Module:
    cfg.validate()
    if cfg.kind == "tiny":
        return TinyBackbone(cfg.base_width, cfg.out_channels)
    return ResNet50Adapter(stage_source, cfg.out_channels)


def extract_basis(backbone: nn.Module, images: torch.Tensor) -> Pyramid:
    return backbone(images)
