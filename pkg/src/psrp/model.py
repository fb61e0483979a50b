"""Full detector: basis pyramid -> optional SEDAM -> shared head."""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import AttentionVariant
from .backbone import Pyramid, build_backbone
from .config import ExperimentConfig
from .head import DetectorHead, HeadOutputs
from .sedam import SEDAM

INIT_STD = 0.01


class Detector(nn.Module):
    def __init__(self, cfg: ExperimentConfig, stage_source=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        channels = cfg.backbone.out_channels
        self.backbone = build_backbone(cfg.backbone, stage_source)
        self.sedam = SEDAM(channels, cfg.sedam) if cfg.train.use_sedam else None
        self.head = DetectorHead(channels, cfg.head)

    @property
    def variant(self) -> AttentionVariant | None:
        return self.sedam.variant if self.sedam is not None else None

    def pyramid(self, images: torch.Tensor) -> Pyramid:
        pyr = self.backbone(images)
        return self.sedam(pyr) if self.sedam is not None else pyr

    def forward(self, images: torch.Tensor) -> list[HeadOutputs]:
        pyr = self.pyramid(images)
        return [self.head(x, i, s) for i, (x, s) in enumerate(zip(pyr.levels, pyr.strides))]


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Gaussian(0, 0.01) conv/linear weights, zero biases, unit GN scale, focal prior on the class bias."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in model.named_modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                noise = torch.randn(m.weight.shape, generator=gen, dtype=torch.float64)
                m.weight.copy_(noise * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            if isinstance(m, DetectorHead):
                m.scales.fill_(1.0)
        for m in model.modules():
            if isinstance(m, DetectorHead):
                m.cls_out.bias.fill_(m.prior_bias())
    return model


def build_model(cfg: ExperimentConfig, seed: int | None = None, stage_source=None) -> Detector:
    model = Detector(cfg, stage_source)
    dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
    model.to(dtype)
    return init_weights(model, cfg.train.seed if seed is None else seed)


def zero_semantic_branch(model: Detector) -> None:
    """Zero the semantic-center output conv so every offset is exactly 0."""
    with torch.no_grad():
        model.head.semantic_out.weight.zero_()
        model.head.semantic_out.bias.zero_()
