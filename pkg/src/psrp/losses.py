"""Per-location target assignment and the three-term detection loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import ContractError, ShapeError
from .head import HeadOutputs

IOU_EPS = 1e-7


def generate_locations(level_shapes: Sequence[tuple[int, int]], strides: Sequence[int], dtype=torch.float64) -> list[torch.Tensor]:
    """Cell-centre pixel coordinates per level, row-major: (s/2 + cx*s, s/2 + cy*s)."""
    if len(level_shapes) != len(strides):
        raise ShapeError(f"{len(level_shapes)} level shapes but {len(strides)} strides")
    locs = []
    for (h, w), s in zip(level_shapes, strides):
        xs = torch.arange(w, dtype=dtype) * s + s / 2
        ys = torch.arange(h, dtype=dtype) * s + s / 2
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        locs.append(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1))
    return locs


@dataclass
class BoxTargets:
    labels: torch.Tensor  # L, 0 = background
    distances: torch.Tensor  # L x 4 (l, t, r, b); zero at background locations
    centerness: torch.Tensor  # L, zero at background locations

    @property
    def positive(self) -> torch.Tensor:
        return self.labels > 0


def centerness_target(d: torch.Tensor) -> torch.Tensor:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)) for positive (l, t, r, b) rows."""
    l, t, r, b = d.unbind(-1)
    lr = torch.minimum(l, r) / torch.maximum(l, r)
    tb = torch.minimum(t, b) / torch.maximum(t, b)
    return torch.sqrt(lr * tb)


def assign_targets(
    locations: Sequence[torch.Tensor],
    boxes: torch.Tensor,
    labels: torch.Tensor,
    ranges: Sequence[tuple[float, float]],
    offsets: torch.Tensor | None = None,
    mode: str = "static",
) -> BoxTargets:
    """Label every location of one image.

    A location is positive for a box when the original location and the
    (optionally offset) effective centre both lie strictly inside it and the
    largest margin measured from the original location falls in the level's
    (lo, hi] range. The smallest such box wins. ``offsets`` are L x 2 pixel
    shifts over the concatenated levels.
    """
    if mode not in ("static", "semantic"):
        raise ContractError(f"unknown assignment mode {mode!r}")
    if len(ranges) != len(locations):
        raise ShapeError(f"{len(ranges)} level ranges for {len(locations)} levels")
    locs = torch.cat(list(locations), dim=0)
    n = locs.shape[0]
    if mode == "semantic":
        if offsets is None:
            raise ContractError("semantic assignment requires semantic offsets")
        if offsets.shape != (n, 2):
            raise ShapeError(f"offsets shape {tuple(offsets.shape)} does not match {n} locations")
    lo = torch.cat([torch.full((len(l),), float(r[0]), dtype=locs.dtype) for l, r in zip(locations, ranges)])
    hi = torch.cat([torch.full((len(l),), float(r[1]), dtype=locs.dtype) for l, r in zip(locations, ranges)])

    boxes = boxes.to(locs.dtype).reshape(-1, 4)
    m = boxes.shape[0]
    out_labels = torch.zeros(n, dtype=torch.long)
    out_dist = torch.zeros(n, 4, dtype=locs.dtype)
    out_ctr = torch.zeros(n, dtype=locs.dtype)
    if m == 0:
        return BoxTargets(out_labels, out_dist, out_ctr)

    x, y = locs[:, 0:1], locs[:, 1:2]
    x1, y1, x2, y2 = boxes.unbind(1)
    d = torch.stack([x - x1, y - y1, x2 - x, y2 - y], dim=2)  # L x M x 4
    inside = d.amin(dim=2) > 0
    if mode == "semantic":
        off = offsets.detach().to(locs.dtype)
        ex, ey = x + off[:, 0:1], y + off[:, 1:2]
        inside = inside & (ex > x1) & (ex < x2) & (ey > y1) & (ey < y2)
    reach = d.amax(dim=2)
    in_range = (reach > lo[:, None]) & (reach <= hi[:, None])
    cand = inside & in_range

    area = ((x2 - x1) * (y2 - y1)).expand(n, m)
    area = torch.where(cand, area, torch.full_like(area, math.inf))
    best = area.argmin(dim=1)
    pos = cand.any(dim=1)
    idx = torch.arange(n)
    chosen = d[idx, best]
    out_labels[pos] = labels.to(torch.long)[best[pos]]
    out_dist[pos] = chosen[pos]
    out_ctr[pos] = centerness_target(chosen[pos])
    return BoxTargets(out_labels, out_dist, out_ctr)


def focal_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float | torch.Tensor | None = None,
) -> torch.Tensor:
    """Sigmoid focal loss summed over P x C elements and divided by ``max(normalizer, 1)``.

    ``labels`` holds class ids in 0..C with 0 the all-negative background.
    ``normalizer`` defaults to the number of positive rows.
    """
    num_classes = logits.shape[-1]
    target = F.one_hot(labels.long(), num_classes + 1)[..., 1:].to(logits.dtype)
    p = torch.sigmoid(logits)
    pos_term = alpha * (1 - p) ** gamma * F.softplus(-logits)
    neg_term = (1 - alpha) * p**gamma * F.softplus(logits)
    loss = (target * pos_term + (1 - target) * neg_term).sum()
    if normalizer is None:
        normalizer = (labels > 0).sum()
    return loss / max(float(normalizer), 1.0)


def _relative_boxes(d: torch.Tensor, shift: torch.Tensor | None) -> torch.Tensor:
    l, t, r, b = d.unbind(-1)
    if shift is None:
        return torch.stack([-l, -t, r, b], dim=-1)
    ox, oy = shift.unbind(-1)
    return torch.stack([ox - l, oy - t, ox + r, oy + b], dim=-1)


def iou_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    weights: torch.Tensor,
    offsets: torch.Tensor | None = None,
    mode: str = "iou",
) -> torch.Tensor:
    """Weighted -ln(IoU) between predicted and target margin boxes at positive locations.

    Both boxes hang off the same location; with ``offsets`` the predicted box
    is centred on the shifted location instead. ``mode="giou"`` uses 1 - GIoU.
    """
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} must both be P x 4")
    if pred.numel() and bool((pred <= 0).any()):
        raise ContractError("predicted distances must be strictly positive")
    wsum = weights.sum()
    if pred.shape[0] == 0 or float(wsum) <= 0:
        return pred.sum() * 0.0
    pb = _relative_boxes(pred, offsets)
    tb = _relative_boxes(target, None)
    iw = (torch.minimum(pb[:, 2], tb[:, 2]) - torch.maximum(pb[:, 0], tb[:, 0])).clamp(min=0)
    ih = (torch.minimum(pb[:, 3], tb[:, 3]) - torch.maximum(pb[:, 1], tb[:, 1])).clamp(min=0)
    inter = iw * ih
    area_p = (pb[:, 2] - pb[:, 0]) * (pb[:, 3] - pb[:, 1])
    area_t = (tb[:, 2] - tb[:, 0]) * (tb[:, 3] - tb[:, 1])
    union = area_p + area_t - inter
    iou = (inter + IOU_EPS) / (union + IOU_EPS)
    if mode == "iou":
        per = -torch.log(iou)
    elif mode == "giou":
        cw = torch.maximum(pb[:, 2], tb[:, 2]) - torch.minimum(pb[:, 0], tb[:, 0])
        ch = torch.maximum(pb[:, 3], tb[:, 3]) - torch.minimum(pb[:, 1], tb[:, 1])
        hull = cw * ch + IOU_EPS
        per = 1 - (iou - (hull - union) / hull)
    else:
        raise ContractError(f"unknown IoU loss mode {mode!r}")
    return (weights * per).sum() / wsum


def centerness_loss(logits: torch.Tensor, targets: torch.Tensor, normalizer: float | torch.Tensor | None = None) -> torch.Tensor:
    """Binary cross-entropy between sigmoid(logits) and center-ness targets, / max(normalizer, 1)."""
    if normalizer is None:
        normalizer = logits.numel()
    if logits.numel() == 0:
        return logits.sum() * 0.0
    bce = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="sum")
    return bce / max(float(normalizer), 1.0)


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    center: torch.Tensor
    total: torch.Tensor
    n_pos: int

    def as_dict(self) -> dict:
        return {
            "cls": float(self.cls.detach()),
            "reg": float(self.reg.detach()),
            "center": float(self.center.detach()),
            "total": float(self.total.detach()),
            "n_pos": int(self.n_pos),
        }


@dataclass
class FlatOutputs:
    """Head outputs of all levels, flattened to N x L x K in level-major, row-major order."""

    cls_logits: torch.Tensor
    distances: torch.Tensor
    centerness_logit: torch.Tensor
    offsets: torch.Tensor
    locations: list[torch.Tensor]
    level_sizes: list[int]


def _flat(t: torch.Tensor) -> torch.Tensor:
    n, k = t.shape[:2]
    return t.permute(0, 2, 3, 1).reshape(n, -1, k)


def flatten_outputs(outputs: Sequence[HeadOutputs]) -> FlatOutputs:
    shapes = [tuple(o.cls_logits.shape[-2:]) for o in outputs]
    strides = [o.stride for o in outputs]
    dtype = outputs[0].cls_logits.dtype
    return FlatOutputs(
        cls_logits=torch.cat([_flat(o.cls_logits) for o in outputs], dim=1),
        distances=torch.cat([_flat(o.distances()) for o in outputs], dim=1),
        centerness_logit=torch.cat([_flat(o.centerness_logit) for o in outputs], dim=1)[..., 0],
        offsets=torch.cat([_flat(o.offsets()) for o in outputs], dim=1),
        locations=generate_locations(shapes, strides, dtype=dtype),
        level_sizes=[h * w for h, w in shapes],
    )


def build_targets(
    flat: FlatOutputs,
    boxes: Sequence[torch.Tensor],
    labels: Sequence[torch.Tensor],
    ranges: Sequence[tuple[float, float]],
    mode: str = "static",
) -> list[BoxTargets]:
    return [
        assign_targets(flat.locations, b, l, ranges, flat.offsets[i] if mode == "semantic" else None, mode)
        for i, (b, l) in enumerate(zip(boxes, labels))
    ]


def total_loss(
    outputs: Sequence[HeadOutputs],
    boxes: Sequence[torch.Tensor],
    labels: Sequence[torch.Tensor],
    ranges: Sequence[tuple[float, float]],
    cfg: LossConfig | None = None,
    mode: str = "static",
) -> LossBreakdown:
    """cls + gamma * reg + beta * center over a batch, with one positive count for the whole batch."""
    cfg = cfg or LossConfig()
    flat = flatten_outputs(outputs)
    targets = build_targets(flat, boxes, labels, ranges, mode)
    t_labels = torch.stack([t.labels for t in targets])
    t_dist = torch.stack([t.distances for t in targets]).to(flat.distances.dtype)
    t_ctr = torch.stack([t.centerness for t in targets]).to(flat.distances.dtype)
    pos = t_labels > 0
    n_pos = int(pos.sum())

    cls = focal_loss(flat.cls_logits, t_labels, cfg.alpha, cfg.gamma_focal, normalizer=n_pos)
    reg = iou_loss(
        flat.distances[pos],
        t_dist[pos],
        t_ctr[pos],
        offsets=flat.offsets[pos] if cfg.revised_regression else None,
        mode=cfg.iou_mode,
    )
    center = centerness_loss(flat.centerness_logit[pos], t_ctr[pos], normalizer=n_pos)
    total = cls + cfg.gamma_balance * reg + cfg.beta_balance * center
    return LossBreakdown(cls, reg, center, total, n_pos)
