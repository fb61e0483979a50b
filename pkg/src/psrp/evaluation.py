"""Self-contained COCO-style box evaluation (AP over IoU .50:.95, AP50, AP75, AP by area)."""
from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import LARGE_AREA, SMALL_AREA, DatasetManifest, coco_to_corner
from .errors import FormatError

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, float(SMALL_AREA)),
    "medium": (float(SMALL_AREA), float(LARGE_AREA)),
    "large": (float(LARGE_AREA), math.inf),
}
MAX_DETS = 100
METRIC_NAMES = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


@dataclass(frozen=True)
class DetRecord:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]
    score: float


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner boxes."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / max(union, 1e-12)


def iou_matrix(dets: np.ndarray, gts: np.ndarray, crowd: np.ndarray | None = None) -> np.ndarray:
    """D x G IoU; against crowd regions the denominator is the detection area."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    lt = np.maximum(dets[:, None, :2], gts[None, :, :2])
    rb = np.minimum(dets[:, None, 2:], gts[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_d = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = area_d[:, None] + area_g[None, :] - inter
    if crowd is not None and crowd.any():
        union = np.where(crowd[None, :], area_d[:, None], union)
    return inter / np.maximum(union, 1e-12)


@dataclass
class MatchResult:
    det_matches: np.ndarray  # T x D, index of matched GT or -1
    det_ignored: np.ndarray  # T x D bool
    gt_matched: np.ndarray  # T x G bool
    gt_ignored: np.ndarray  # G bool
    scores: np.ndarray  # D, sorted descending


def match(
    det_boxes: np.ndarray,
    det_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_thresholds: Sequence[float] | float = IOU_THRESHOLDS,
    gt_ignore: np.ndarray | None = None,
    gt_crowd: np.ndarray | None = None,
    area_range: tuple[float, float] = AREA_RANGES["all"],
    max_dets: int = MAX_DETS,
) -> MatchResult:
    """Greedy matching of one image/class: detections by descending score take the best-IoU free GT.

    Ignored GTs (crowd or out of area range) absorb detections without
    counting them as true or false positives; unmatched detections outside the
    area range are ignored as well.
    """
    thresholds = np.atleast_1d(np.asarray(iou_thresholds, dtype=float))
    det_boxes = np.asarray(det_boxes, dtype=float).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    g = len(gt_boxes)
    crowd = np.zeros(g, bool) if gt_crowd is None else np.asarray(gt_crowd, bool)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    ignore = crowd | (areas < area_range[0]) | (areas >= area_range[1])
    if gt_ignore is not None:
        ignore = ignore | np.asarray(gt_ignore, bool)
    # non-ignored GTs first, stable
    gorder = np.argsort(ignore, kind="stable")
    gt_boxes, ignore, crowd = gt_boxes[gorder], ignore[gorder], crowd[gorder]

    dorder = np.argsort(-np.asarray(det_scores, dtype=float), kind="stable")[:max_dets]
    det_boxes = det_boxes[dorder]
    scores = np.asarray(det_scores, dtype=float)[dorder]
    ious = iou_matrix(det_boxes, gt_boxes, crowd)

    t, d = len(thresholds), len(det_boxes)
    dm = np.full((t, d), -1, dtype=int)
    dig = np.zeros((t, d), dtype=bool)
    gm = np.zeros((t, g), dtype=bool)
    for ti, thr in enumerate(thresholds):
        for di in range(d):
            best = min(thr, 1 - 1e-10)
            m = -1
            for gi in range(g):
                if gm[ti, gi] and not crowd[gi]:
                    continue
                if m > -1 and not ignore[m] and ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best = ious[di, gi]
                m = gi
            if m == -1:
                continue
            dig[ti, di] = ignore[m]
            dm[ti, di] = gorder[m]
            gm[ti, m] = True
    det_areas = (det_boxes[:, 2] - det_boxes[:, 0]) * (det_boxes[:, 3] - det_boxes[:, 1])
    outside = (det_areas < area_range[0]) | (det_areas >= area_range[1])
    dig |= (dm == -1) & outside[None, :]
    gt_matched = np.zeros((t, g), dtype=bool)
    gt_matched[:, gorder] = gm
    gt_ignored = np.zeros(g, dtype=bool)
    gt_ignored[gorder] = ignore
    return MatchResult(dm, dig, gt_matched, gt_ignored, scores)


def average_precision(tp: Sequence[bool], num_gt: int, fp: Sequence[bool] | None = None) -> float:
    """101-point interpolated AP of a score-ordered TP/FP sequence.

    ``fp`` defaults to ``not tp``; pass it to exclude ignored detections.
    """
    tp = np.asarray(tp, dtype=bool)
    fp = ~tp if fp is None else np.asarray(fp, dtype=bool)
    if num_gt <= 0:
        return float("nan")
    tps = np.cumsum(tp).astype(float)
    fps = np.cumsum(fp).astype(float)
    recall = tps / num_gt
    precision = tps / np.maximum(tps + fps, np.finfo(float).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.zeros(len(RECALL_THRESHOLDS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


@dataclass
class MetricsTable:
    overall: dict[str, float | None]
    per_class: dict[int, dict[str, float | None]] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_class": {
                str(c): {"name": self.class_names.get(c, str(c)), **m} for c, m in sorted(self.per_class.items())
            },
        }

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _nanmean(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


def _group(records):
    out = defaultdict(list)
    for r in records:
        out[(r.image_id, r.class_id)].append(r)
    return out


def evaluate(detections: Iterable[DetRecord], manifest: DatasetManifest) -> MetricsTable:
    """COCO-protocol metrics of ``detections`` (contiguous class ids) against the manifest.

    Undefined entries (no ground truth in a bucket) are ``None`` and excluded
    from the class means.
    """
    image_ids = {im.id for im in manifest.images}
    dets = list(detections)
    for d in dets:
        if d.image_id not in image_ids:
            raise FormatError(f"detection references unknown image id {d.image_id}")
        if d.class_id not in manifest.categories:
            raise FormatError(f"detection references unknown category {d.class_id}")
    det_by = _group(dets)
    gt_by = _group(manifest.annotations)
    crowd_by = _group(manifest.crowd)
    classes = sorted(manifest.categories)

    per_class = {}
    for c in classes:
        res = {}
        for area_name, rng in AREA_RANGES.items():
            tps, fps, scores = [], [], []
            npig = 0
            for img in sorted(image_ids):
                gts = gt_by.get((img, c), [])
                crs = crowd_by.get((img, c), [])
                ds = det_by.get((img, c), [])
                if not gts and not crs and not ds:
                    continue
                gboxes = np.array([g.box for g in gts] + [g.box for g in crs], dtype=float).reshape(-1, 4)
                gcrowd = np.array([False] * len(gts) + [True] * len(crs))
                mr = match(
                    np.array([d.box for d in ds], dtype=float).reshape(-1, 4),
                    np.array([d.score for d in ds], dtype=float),
                    gboxes,
                    IOU_THRESHOLDS,
                    gt_crowd=gcrowd,
                    area_range=rng,
                )
                npig += int((~mr.gt_ignored).sum())
                tps.append((mr.det_matches > -1) & ~mr.det_ignored)
                fps.append((mr.det_matches == -1) & ~mr.det_ignored)
                scores.append(mr.scores)
            if npig == 0:
                res[area_name] = [float("nan")] * len(IOU_THRESHOLDS)
                continue
            if scores:
                all_scores = np.concatenate(scores)
                order = np.argsort(-all_scores, kind="mergesort")
                tp_all = np.concatenate(tps, axis=1)[:, order]
                fp_all = np.concatenate(fps, axis=1)[:, order]
            else:
                tp_all = fp_all = np.zeros((len(IOU_THRESHOLDS), 0), bool)
            res[area_name] = [average_precision(tp_all[t], npig, fp_all[t]) for t in range(len(IOU_THRESHOLDS))]
        per_class[c] = {
            "AP": _mean_or_none(res["all"]),
            "AP50": _none_if_nan(res["all"][0]),
            "AP75": _none_if_nan(res["all"][5]),
            "AP_S": _mean_or_none(res["small"]),
            "AP_M": _mean_or_none(res["medium"]),
            "AP_L": _mean_or_none(res["large"]),
        }
    overall = {k: _nanmean(per_class[c][k] for c in classes) for k in METRIC_NAMES}
    return MetricsTable(overall, per_class, dict(manifest.categories))


def _none_if_nan(v: float) -> float | None:
    return None if math.isnan(v) else float(v)


def _mean_or_none(vals) -> float | None:
    return None if any(math.isnan(v) for v in vals) else float(np.mean(vals))


def load_results(path: str | os.PathLike, manifest: DatasetManifest) -> list[DetRecord]:
    """Read a COCO results JSON file into records with contiguous class ids."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: results must be a JSON list")
    out = []
    for i, r in enumerate(data):
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in r:
                raise FormatError(f"{path}: result {i} is missing key {key!r}")
        out.append(
            DetRecord(int(r["image_id"]), manifest.contiguous_category(int(r["category_id"])), coco_to_corner(r["bbox"]), float(r["score"]))
        )
    return out
