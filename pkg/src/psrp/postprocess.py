"""Box decoding (with optional semantic revision), scoring, NMS and single-image inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import PostprocessConfig
from .errors import ShapeError
from .head import HeadOutputs
from .losses import generate_locations

MIN_BOX_SIDE = 1.0


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


@dataclass
class DetectionSet:
    image_id: int
    boxes: torch.Tensor = field(default_factory=lambda: torch.zeros(0, 4))  # K x 4 corner boxes
    scores: torch.Tensor = field(default_factory=lambda: torch.zeros(0))
    labels: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))

    def __len__(self) -> int:
        return int(self.scores.numel())

    def detections(self) -> list[Detection]:
        return [
            Detection(tuple(float(v) for v in b), int(c), float(s))
            for b, c, s in zip(self.boxes.tolist(), self.labels.tolist(), self.scores.tolist())
        ]

    def scaled(self, factor: float) -> "DetectionSet":
        return DetectionSet(self.image_id, self.boxes * factor, self.scores, self.labels)


def decode_boxes(
    locations: torch.Tensor,
    distances: torch.Tensor,
    offsets: torch.Tensor | None = None,
    revise: bool = True,
    image_size: tuple[float, float] | None = None,
) -> torch.Tensor:
    """Corner boxes from margins around (optionally offset) locations, clipped to ``image_size`` (w, h)."""
    centre = locations
    if revise and offsets is not None:
        centre = locations + offsets
    cx, cy = centre[..., 0], centre[..., 1]
    l, t, r, b = distances.unbind(-1)
    boxes = torch.stack([cx - l, cy - t, r + cx, b + cy], dim=-1)
    if image_size is not None:
        w, h = image_size
        boxes = torch.stack(
            [boxes[..., 0].clamp(0, w), boxes[..., 1].clamp(0, h), boxes[..., 2].clamp(0, w), boxes[..., 3].clamp(0, h)],
            dim=-1,
        )
    return boxes


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, A x 4 vs B x 4 -> A x B."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS for one class; returns kept indices in descending score order."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    ious = box_iou(boxes[order], boxes[order])
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return order[torch.tensor(keep, dtype=torch.long)]


def batched_nms(boxes: torch.Tensor, scores: torch.Tensor, labels: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Per-class NMS; kept indices sorted by descending score."""
    keep = [torch.nonzero(labels == c).flatten()[nms(boxes[labels == c], scores[labels == c], iou_threshold)] for c in torch.unique(labels)]
    if not keep:
        return torch.zeros(0, dtype=torch.long)
    keep = torch.cat(keep)
    return keep[torch.argsort(scores[keep], descending=True, stable=True)]


@dataclass
class Candidates:
    scores: torch.Tensor  # K
    labels: torch.Tensor  # K, 1..C
    locations: torch.Tensor  # K x 2
    distances: torch.Tensor  # K x 4
    offsets: torch.Tensor  # K x 2


def score_and_filter(out: HeadOutputs, cfg: PostprocessConfig, index: int = 0) -> Candidates:
    """Scored candidates of one image at one level: sigmoid(cls) * sigmoid(centerness) above threshold, top-k."""
    cls = out.cls_logits[index]
    c, h, w = cls.shape
    probs = torch.sigmoid(cls).reshape(c, -1).T  # HW x C
    ctr = torch.sigmoid(out.centerness_logit[index]).reshape(-1, 1)
    scores = probs * ctr
    mask = scores > cfg.score_threshold
    loc_idx, cls_idx = torch.nonzero(mask, as_tuple=True)
    flat_scores = scores[loc_idx, cls_idx]
    if flat_scores.numel() > cfg.pre_nms_top_k:
        top = torch.topk(flat_scores, cfg.pre_nms_top_k, sorted=True).indices
        loc_idx, cls_idx, flat_scores = loc_idx[top], cls_idx[top], flat_scores[top]
    locs = generate_locations([(h, w)], [out.stride], dtype=cls.dtype)[0]
    dist = out.distances()[index].reshape(4, -1).T
    offs = out.offsets()[index].reshape(2, -1).T
    return Candidates(flat_scores, cls_idx + 1, locs[loc_idx], dist[loc_idx], offs[loc_idx])


def postprocess(
    outputs: Sequence[HeadOutputs],
    cfg: PostprocessConfig,
    image_size: tuple[float, float],
    index: int = 0,
    image_id: int = 0,
) -> DetectionSet:
    """Decode, filter and NMS the head outputs of image ``index`` of a batch."""
    cands = [score_and_filter(o, cfg, index) for o in outputs]
    scores = torch.cat([c.scores for c in cands])
    labels = torch.cat([c.labels for c in cands])
    boxes = decode_boxes(
        torch.cat([c.locations for c in cands]),
        torch.cat([c.distances for c in cands]),
        torch.cat([c.offsets for c in cands]),
        revise=cfg.revise,
        image_size=image_size,
    )
    wide = ((boxes[:, 2] - boxes[:, 0]) >= MIN_BOX_SIDE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_BOX_SIDE)
    boxes, scores, labels = boxes[wide], scores[wide], labels[wide]
    keep = batched_nms(boxes, scores, labels, cfg.nms_iou)[: cfg.max_detections_per_image]
    return DetectionSet(image_id, boxes[keep].detach(), scores[keep].detach(), labels[keep])


@torch.no_grad()
def infer_batch(model, images: torch.Tensor, cfg: PostprocessConfig, image_ids: Sequence[int] | None = None, image_sizes=None) -> list[DetectionSet]:
    """Detections for every image of an N x 3 x S x S batch, in input pixels."""
    if images.shape[-1] % 32 or images.shape[-2] % 32:
        raise ShapeError(f"image size {tuple(images.shape[-2:])} is not divisible by 32")
    was_training = model.training
    model.eval()
    outputs = model(images)
    model.train(was_training)
    n = images.shape[0]
    image_ids = list(image_ids) if image_ids is not None else list(range(n))
    full = (float(images.shape[-1]), float(images.shape[-2]))
    sizes = image_sizes or [full] * n
    return [postprocess(outputs, cfg, sizes[i], i, image_ids[i]) for i in range(n)]


def infer_image(model, image: torch.Tensor, cfg: PostprocessConfig, image_id: int = 0, image_size=None) -> DetectionSet:
    """Full pipeline for one 3 x S x S image (or a 1 x 3 x S x S batch)."""
    if image.dim() == 3:
        image = image[None]
    return infer_batch(model, image, cfg, [image_id], [image_size] if image_size else None)[0]


def to_coco_results(dets: Sequence[DetectionSet], category_ids: dict[int, int] | None = None) -> list[dict]:
    """COCO results records ({image_id, category_id, bbox [x, y, w, h], score})."""
    out = []
    for ds in dets:
        for b, c, s in zip(ds.boxes.tolist(), ds.labels.tolist(), ds.scores.tolist()):
            cat = category_ids[c] if category_ids else c
            out.append(
                {
                    "image_id": int(ds.image_id),
                    "category_id": int(cat),
                    "bbox": [round(b[0], 4), round(b[1], 4), round(b[2] - b[0], 4), round(b[3] - b[1], 4)],
                    "score": round(float(s), 6),
                }
            )
    return out


def detections_array(ds: DetectionSet) -> np.ndarray:
    """K x 6 array (x1, y1, x2, y2, class, score)."""
    return np.concatenate(
        [ds.boxes.double().numpy(), ds.labels.double().numpy()[:, None], ds.scores.double().numpy()[:, None]], axis=1
    ).reshape(-1, 6)
