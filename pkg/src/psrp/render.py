"""Draw detections onto an image (boxes plus "label score" captions)."""
from __future__ import annotations

import os
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .postprocess import Detection

# tab10
PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
    (188, 189, 34),
    (23, 190, 207),
)
LINE_WIDTH = 2


def class_color(class_id: int) -> tuple[int, int, int]:
    return PALETTE[(class_id - 1) % len(PALETTE)]


def draw_detections(
    image: Image.Image,
    dets: Sequence[Detection],
    class_names: dict[int, str] | None = None,
) -> Image.Image:
    """Copy of ``image`` with every detection drawn inside its own (line-width padded) box region.

    Pixels outside the union of those regions are left untouched.
    """
    base = image.convert("RGB")
    out = base.copy()
    font = ImageFont.load_default()
    w, h = base.size
    for det in sorted(dets, key=lambda d: d.score):
        x1, y1, x2, y2 = (int(round(v)) for v in det.box)
        x1, y1 = max(0, min(x1, w - 1)), max(0, min(y1, h - 1))
        x2, y2 = max(x1 + 1, min(x2, w)), max(y1 + 1, min(y2, h))
        layer = out.copy()
        draw = ImageDraw.Draw(layer)
        color = class_color(det.class_id)
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=color, width=LINE_WIDTH)
        name = (class_names or {}).get(det.class_id, str(det.class_id))
        caption = f"{name} {det.score:.2f}"
        tb = draw.textbbox((x1 + LINE_WIDTH + 1, y1 + LINE_WIDTH), caption, font=font)
        draw.rectangle(tb, fill=color)
        draw.text((x1 + LINE_WIDTH + 1, y1 + LINE_WIDTH), caption, fill=(255, 255, 255), font=font)
        # keep the caption from spilling beyond the box
        region = (x1, y1, x2, y2)
        out.paste(layer.crop(region), region[:2])
    return out


def render_detections(
    image: str | os.PathLike | Image.Image | np.ndarray,
    dets: Sequence[Detection],
    out_path: str | os.PathLike,
    class_names: dict[int, str] | None = None,
) -> None:
    if isinstance(image, np.ndarray):
        arr = image if image.dtype == np.uint8 else np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
        img = Image.fromarray(arr)
    elif isinstance(image, Image.Image):
        img = image
    else:
        img = Image.open(image)
        img.load()
    draw_detections(img, dets, class_names).save(out_path, format="PNG")
