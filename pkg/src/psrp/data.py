"""COCO-format ingestion, a deterministic synthetic shapes dataset, and batching."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from .errors import ConfigError, FormatError

# COCO area buckets (box area in px^2)
SMALL_AREA = 32**2
LARGE_AREA = 96**2


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    file_path: str = ""
    pixel_data: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise FormatError(f"image {self.id} is {self.width}x{self.height}; both sides must be >= 32")

    def pixels(self) -> np.ndarray:
        """H x W x 3 float array in [0, 1], loaded from ``file_path`` on first use."""
        if self.pixel_data is None:
            with Image.open(self.file_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            if arr.shape[:2] != (self.height, self.width):
                raise FormatError(
                    f"{self.file_path}: pixel size {arr.shape[1]}x{arr.shape[0]} "
                    f"disagrees with annotation {self.width}x{self.height}"
                )
            self.pixel_data = arr
        return self.pixel_data


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass
class DatasetManifest:
    images: list[ImageRecord]
    annotations: list[GroundTruthBox]
    categories: dict[int, str]
    # contiguous class id -> original dataset category id
    category_ids: dict[int, int] = field(default_factory=dict)
    # iscrowd regions: never trained on, ignored during evaluation
    crowd: list[GroundTruthBox] = field(default_factory=list)

    def __post_init__(self):
        if not self.category_ids:
            self.category_ids = {c: c for c in self.categories}
        ids = {im.id for im in self.images}
        for ann in list(self.annotations) + list(self.crowd):
            if ann.image_id not in ids:
                raise FormatError(f"annotation references unknown image id {ann.image_id}")
            if not 1 <= ann.class_id <= self.num_classes:
                raise FormatError(f"annotation class id {ann.class_id} outside [1, {self.num_classes}]")

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def image(self, image_id: int) -> ImageRecord:
        return self._by_id()[image_id]

    def _by_id(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def boxes_for(self, image_id: int) -> list[GroundTruthBox]:
        return [a for a in self.annotations if a.image_id == image_id]

    def original_category(self, class_id: int) -> int:
        return self.category_ids[class_id]

    def contiguous_category(self, original_id: int) -> int:
        for c, o in self.category_ids.items():
            if o == original_id:
                return c
        raise FormatError(f"unknown category id {original_id}")


def coco_to_corner(bbox: Sequence[float]) -> tuple[float, float, float, float]:
    x, y, w, h = (float(v) for v in bbox)
    return (x, y, x + w, y + h)


def corner_to_coco(box: Sequence[float]) -> list[float]:
    x1, y1, x2, y2 = (float(v) for v in box)
    return [x1, y1, x2 - x1, y2 - y1]


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing key {key!r}")
    return obj[key]


def load_coco(annotation_path: str | os.PathLike, image_root: str | os.PathLike | None = None) -> DatasetManifest:
    """Read a COCO detection JSON file into a manifest.

    Boxes are converted to corner form, degenerate and crowd annotations are
    split off, and the sparse category ids are remapped to ``1..C``.
    """
    annotation_path = Path(annotation_path)
    image_root = Path(image_root) if image_root is not None else annotation_path.parent
    with open(annotation_path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{annotation_path}: invalid JSON ({exc})") from exc
    where = str(annotation_path)
    raw_images = _require(data, "images", where)
    raw_anns = _require(data, "annotations", where)
    raw_cats = _require(data, "categories", where)

    cats = sorted(raw_cats, key=lambda c: int(_require(c, "id", where + " categories")))
    remap = {int(c["id"]): i + 1 for i, c in enumerate(cats)}
    categories = {remap[int(c["id"])]: str(_require(c, "name", where + " categories")) for c in cats}

    images = []
    for im in raw_images:
        images.append(
            ImageRecord(
                id=int(_require(im, "id", where + " images")),
                width=int(_require(im, "width", where + " images")),
                height=int(_require(im, "height", where + " images")),
                file_path=str(image_root / _require(im, "file_name", where + " images")),
            )
        )
    sizes = {im.id: (im.width, im.height) for im in images}

    annotations, crowd = [], []
    for ann in raw_anns:
        image_id = int(_require(ann, "image_id", where + " annotations"))
        if image_id not in sizes:
            raise FormatError(f"{where}: annotation references unknown image id {image_id}")
        cat = int(_require(ann, "category_id", where + " annotations"))
        if cat not in remap:
            raise FormatError(f"{where}: annotation references unknown category id {cat}")
        bbox = _require(ann, "bbox", where + " annotations")
        if len(bbox) != 4:
            raise FormatError(f"{where}: bbox must have 4 numbers, got {bbox!r}")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            continue
        W, H = sizes[image_id]
        x1, y1 = min(max(x, 0.0), W), min(max(y, 0.0), H)
        x2, y2 = min(max(x + w, 0.0), W), min(max(y + h, 0.0), H)
        if x2 <= x1 or y2 <= y1:
            continue
        gt = GroundTruthBox(image_id, remap[cat], (x1, y1, x2, y2))
        (crowd if ann.get("iscrowd", 0) else annotations).append(gt)

    return DatasetManifest(
        images=images,
        annotations=annotations,
        categories=categories,
        category_ids={v: k for k, v in remap.items()},
        crowd=crowd,
    )


def manifest_to_coco(manifest: DatasetManifest, root: str | os.PathLike | None = None) -> dict:
    """COCO JSON dict for a manifest; file names are made relative to ``root``."""
    images = []
    for im in manifest.images:
        name = im.file_path
        if root is not None and name:
            name = os.path.relpath(name, root)
        images.append({"id": im.id, "width": im.width, "height": im.height, "file_name": name})
    anns = []
    for i, (a, crowd) in enumerate(
        [(a, 0) for a in manifest.annotations] + [(a, 1) for a in manifest.crowd], start=1
    ):
        bbox = corner_to_coco(a.box)
        anns.append(
            {
                "id": i,
                "image_id": a.image_id,
                "category_id": manifest.original_category(a.class_id),
                "bbox": bbox,
                "area": bbox[2] * bbox[3],
                "iscrowd": crowd,
            }
        )
    cats = [{"id": manifest.original_category(c), "name": n} for c, n in sorted(manifest.categories.items())]
    return {"images": images, "annotations": anns, "categories": cats}


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_COLORS = {
    "circle": (0.85, 0.15, 0.15),
    "square": (0.15, 0.8, 0.2),
    "triangle": (0.2, 0.3, 0.9),
}


@dataclass
class SynthConfig:
    num_images: int = 8
    image_size: int = 128
    classes: list = field(default_factory=lambda: ["circle", "square", "triangle"])
    # side-length ranges in px, chosen so box areas land in the COCO S/M/L buckets
    size_buckets: dict = field(
        default_factory=lambda: {"small": [12, 28], "medium": [36, 90], "large": [100, 120]}
    )
    mix: dict = field(default_factory=lambda: {"small": 1, "medium": 1, "large": 0})
    min_objects_per_image: int = 1
    max_objects_per_image: int = 3
    gap: int = 3

    def validate(self) -> None:
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.num_images < 1:
            raise ConfigError("num_images must be >= 1")
        if not 1 <= self.min_objects_per_image <= self.max_objects_per_image:
            raise ConfigError("need 1 <= min_objects_per_image <= max_objects_per_image")
        unknown = [c for c in self.classes if c not in SHAPE_COLORS]
        if unknown or not self.classes:
            raise ConfigError(f"unknown shape classes {unknown}; available {sorted(SHAPE_COLORS)}")
        spans = []
        for name, weight in self.mix.items():
            if name not in self.size_buckets:
                raise ConfigError(f"mix names unknown bucket {name!r}")
            if weight < 0:
                raise ConfigError("mix weights must be non-negative")
        if sum(self.mix.values()) <= 0:
            raise ConfigError("mix must have positive total weight")
        for name, (lo, hi) in self.size_buckets.items():
            if not 4 <= lo <= hi:
                raise ConfigError(f"size bucket {name!r} must satisfy 4 <= lo <= hi")
            spans.append((lo, hi, name))
            if self.mix.get(name, 0) > 0 and hi + 2 * self.gap > self.image_size:
                raise ConfigError(
                    f"size bucket {name!r} (up to {hi}px) cannot be placed in a {self.image_size}px image"
                )
        spans.sort()
        for (_, hi_a, a), (lo_b, _, b) in zip(spans, spans[1:]):
            if lo_b <= hi_a:
                raise ConfigError(f"size buckets {a!r} and {b!r} overlap")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SynthConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def _shape_mask(kind: str, side: int) -> np.ndarray:
    """Boolean side x side raster of a shape, sampled at pixel centres."""
    c = np.arange(side) + 0.5
    xx, yy = np.meshgrid(c, c)
    if kind == "square":
        return np.ones((side, side), dtype=bool)
    if kind == "circle":
        r = side / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        half_width = (yy / side) * (side / 2.0)
        return np.abs(xx - side / 2.0) <= half_width
    raise ConfigError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-saturation grey texture: smooth gradient plus stripes plus noise."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy, phase = rng.uniform(2, 6), rng.uniform(2, 6), rng.uniform(0, 2 * math.pi)
    base = 0.45 + 0.08 * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase) + 0.05 * (xx - yy)
    noise = rng.normal(0.0, 0.02, size=(size, size))
    grey = np.clip(base + noise, 0.25, 0.65)
    tint = rng.uniform(-0.02, 0.02, size=3)
    return np.clip(grey[..., None] + tint, 0.0, 1.0)


def _bucket_schedule(cfg: SynthConfig, total: int, rng: np.random.Generator) -> list[str]:
    """Stratified bucket labels for ``total`` objects, proportional to ``cfg.mix``."""
    names = sorted(n for n, w in cfg.mix.items() if w > 0)
    weights = np.array([cfg.mix[n] for n in names], dtype=float)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    labels = [n for n, k in zip(names, counts) for _ in range(k)]
    rng.shuffle(labels)
    return labels


PLACEMENT_ROUNDS = 20


def _place(rng, sides, size, gap, tries=500):
    """Random non-overlapping top-left corners for square footprints, largest first."""
    order = sorted(range(len(sides)), key=lambda i: -sides[i])
    for _ in range(20):
        placed: dict[int, tuple[int, int]] = {}
        ok = True
        for i in order:
            s = sides[i]
            for _ in range(tries):
                x = int(rng.integers(gap, size - s - gap + 1))
                y = int(rng.integers(gap, size - s - gap + 1))
                if all(
                    x + s + gap <= px or px + sides[j] + gap <= x or y + s + gap <= py or py + sides[j] + gap <= y
                    for j, (px, py) in placed.items()
                ):
                    placed[i] = (x, y)
                    break
            else:
                ok = False
                break
        if ok:
            return [placed[i] for i in range(len(sides))]
    return None


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir: str | os.PathLike | None = None) -> DatasetManifest:
    """Render a deterministic shapes dataset; write PNGs and ``annotations.json`` when ``out_dir`` is set."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    counts = [int(rng.integers(cfg.min_objects_per_image, cfg.max_objects_per_image + 1)) for _ in range(cfg.num_images)]
    schedule = _bucket_schedule(cfg, sum(counts), rng)
    categories = {i + 1: name for i, name in enumerate(cfg.classes)}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)

    images, annotations = [], []
    cursor = 0
    for idx, n in enumerate(counts):
        image_id = idx + 1
        buckets = schedule[cursor : cursor + n]
        cursor += n
        size = cfg.image_size
        canvas = _background(rng, size)
        corners = None
        # a crowded draw gets fresh sizes from the same buckets before giving up
        for _ in range(PLACEMENT_ROUNDS):
            sides = [int(rng.integers(cfg.size_buckets[b][0], cfg.size_buckets[b][1] + 1)) for b in buckets]
            corners = _place(rng, sides, size, cfg.gap)
            if corners is not None:
                break
        if corners is None:
            raise ConfigError(
                f"could not place objects of sides {sides} in a {size}px image; "
                "lower max_objects_per_image or the large-bucket share"
            )
        for side, (x0, y0) in zip(sides, corners):
            cls = int(rng.integers(1, len(cfg.classes) + 1))
            kind = categories[cls]
            mask = _shape_mask(kind, side)
            color = np.clip(np.array(SHAPE_COLORS[kind]) + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
            region = canvas[y0 : y0 + side, x0 : x0 + side]
            region[mask] = color
            rows, cols = np.nonzero(mask)
            box = (float(x0 + cols.min()), float(y0 + rows.min()), float(x0 + cols.max() + 1), float(y0 + rows.max() + 1))
            annotations.append(GroundTruthBox(image_id, cls, box))
        pixels = np.round(canvas * 255.0).astype(np.uint8)
        path = ""
        if out is not None:
            path = str(out / "images" / f"{image_id:06d}.png")
            Image.fromarray(pixels).save(path)
        images.append(ImageRecord(image_id, size, size, path, pixels.astype(np.float64) / 255.0))

    manifest = DatasetManifest(images, annotations, categories)
    if out is not None:
        with open(out / "annotations.json", "w") as fh:
            json.dump(manifest_to_coco(manifest, out), fh, indent=1, sort_keys=True)
        with open(out / "synth.yaml", "w") as fh:
            yaml.safe_dump({**asdict(cfg), "seed": seed}, fh, sort_keys=True)
    return manifest


def area_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # N x 3 x S x S
    boxes: list[torch.Tensor]  # per image, M x 4 corner boxes in resized pixels
    labels: list[torch.Tensor]  # per image, M class ids in 1..C
    image_ids: list[int]
    scales: list[float]


def letterbox(pixels: np.ndarray, target_size: int) -> tuple[np.ndarray, float]:
    """Aspect-preserving resize into a ``target_size`` square, zero padded bottom/right."""
    h, w = pixels.shape[:2]
    scale = target_size / max(h, w)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    if (nw, nh) != (w, h):
        im = Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8))
        resized = np.asarray(im.resize((nw, nh), Image.BILINEAR), dtype=np.float64) / 255.0
    else:
        resized = pixels
    out = np.zeros((target_size, target_size, 3), dtype=np.float64)
    out[:nh, :nw] = resized
    return out, scale


def scale_boxes(boxes: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64) * scale


def prepare_image(manifest: DatasetManifest, image: ImageRecord, target_size: int, dtype=torch.float32):
    pixels, scale = letterbox(image.pixels(), target_size)
    gts = manifest.boxes_for(image.id)
    boxes = scale_boxes(np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4), scale)
    labels = np.array([g.class_id for g in gts], dtype=np.int64)
    tensor = torch.from_numpy(pixels.transpose(2, 0, 1).copy()).to(dtype)
    return tensor, torch.from_numpy(boxes).to(dtype), torch.from_numpy(labels), scale


def batch_iterator(
    manifest: DatasetManifest,
    batch_size: int,
    target_size: int,
    shuffle_seed: int | None = None,
    dtype=torch.float32,
) -> Iterator[Batch]:
    """One pass over the manifest in batches of letterboxed images."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if target_size % 32:
        raise ConfigError(f"target_size must be divisible by 32, got {target_size}")
    if not manifest.images:
        raise FormatError("manifest has no images")
    order = np.arange(len(manifest.images))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(manifest.images))
    for start in range(0, len(order), batch_size):
        items = [prepare_image(manifest, manifest.images[i], target_size, dtype) for i in order[start : start + batch_size]]
        yield Batch(
            images=torch.stack([it[0] for it in items]),
            boxes=[it[1] for it in items],
            labels=[it[2] for it in items],
            image_ids=[manifest.images[i].id for i in order[start : start + batch_size]],
            scales=[it[3] for it in items],
        )
