"""Regenerate eval_fixture.json from the brute-force oracle.

Run from the tests directory: python data/make_eval_fixture.py
"""
import json
import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from oracles import brute_force_ap  # noqa: E402

IMAGES = [{"id": i, "width": 200, "height": 200, "file_name": f"{i}.png"} for i in (1, 2, 3)]
CATEGORIES = [{"id": 1, "name": "circle"}, {"id": 2, "name": "square"}]
# (image, class, x1, y1, x2, y2)
GTS = [
    (1, 1, 10, 10, 30, 30),
    (1, 1, 50, 50, 110, 110),
    (2, 1, 0, 0, 120, 120),
    (2, 1, 130, 130, 150, 150),
    (3, 1, 20, 20, 80, 80),
    (1, 2, 120, 10, 170, 60),
    (3, 2, 100, 100, 200, 200),
]
# (image, class, x1, y1, x2, y2, score); scores are distinct
DETS = [
    (1, 1, 10, 10, 30, 30, 0.95),
    (1, 1, 52, 52, 112, 112, 0.90),
    (1, 1, 150, 150, 170, 170, 0.85),
    (1, 1, 50, 50, 110, 110, 0.30),
    (2, 1, 0, 0, 120, 100, 0.80),
    (2, 1, 135, 135, 155, 155, 0.70),
    (2, 1, 131, 131, 151, 151, 0.60),
    (3, 1, 25, 25, 85, 85, 0.75),
    (1, 2, 120, 10, 170, 60, 0.92),
    (1, 2, 125, 15, 175, 65, 0.40),
    (3, 2, 110, 110, 200, 200, 0.65),
    (3, 2, 0, 150, 40, 190, 0.50),
]
AREAS = {"all": (0.0, math.inf), "small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, math.inf)}


def main():
    thresholds = np.linspace(0.5, 0.95, 10)
    per_class = {}
    for c in (1, 2):
        gts = [(g[0], g[2:]) for g in GTS if g[1] == c]
        dets = [(d[0], d[2:6], d[6]) for d in DETS if d[1] == c]
        aps = {name: [brute_force_ap(dets, gts, t, rng) for t in thresholds] for name, rng in AREAS.items()}
        mean = lambda v: None if any(x is None for x in v) else float(np.mean(v))
        per_class[c] = {
            "AP": mean(aps["all"]),
            "AP50": aps["all"][0],
            "AP75": aps["all"][5],
            "AP_S": mean(aps["small"]),
            "AP_M": mean(aps["medium"]),
            "AP_L": mean(aps["large"]),
        }
    overall = {}
    for k in per_class[1]:
        vals = [per_class[c][k] for c in per_class if per_class[c][k] is not None]
        overall[k] = float(np.mean(vals)) if vals else None
    coco = {
        "images": IMAGES,
        "categories": CATEGORIES,
        "annotations": [
            {"id": i + 1, "image_id": g[0], "category_id": g[1], "bbox": [g[2], g[3], g[4] - g[2], g[5] - g[3]], "iscrowd": 0}
            for i, g in enumerate(GTS)
        ],
    }
    results = [{"image_id": d[0], "category_id": d[1], "bbox": [d[2], d[3], d[4] - d[2], d[5] - d[3]], "score": d[6]} for d in DETS]
    out = {"coco": coco, "results": results, "expected": {"overall": overall, "per_class": {str(c): v for c, v in per_class.items()}}}
    path = Path(__file__).with_name("eval_fixture.json")
    path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(json.dumps(out["expected"], indent=1))


if __name__ == "__main__":
    main()
