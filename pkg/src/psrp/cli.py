"""Command line interface: synth-data, train, infer, eval, ablate, render."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .data import SynthConfig, generate_synthetic, letterbox, load_coco
from .errors import PsrpError
from .postprocess import Detection, infer_image, to_coco_results

log = logging.getLogger("psrp")


def _config(args):
    return load_config(args.config, args.set or [])


def cmd_synth_data(args) -> int:
    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    if args.num_images is not None:
        cfg.num_images = args.num_images
    if args.image_size is not None:
        cfg.image_size = args.image_size
    manifest = generate_synthetic(cfg, args.seed, args.out)
    print(f"wrote {len(manifest.images)} images, {len(manifest.annotations)} boxes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    manifest = load_coco(args.data, args.images)
    if cfg.head.num_classes != manifest.num_classes:
        log.info("setting head.num_classes to %d from the dataset", manifest.num_classes)
        cfg.head.num_classes = manifest.num_classes
    result = train(cfg, manifest, args.out, resume=args.resume)
    last = result.records[-1] if result.records else {}
    print(json.dumps({"iterations": result.state.iteration, "final": last, "checkpoint": str(result.checkpoints[-1])}))
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    from .train import load_model

    model, ckpt = load_model(args.checkpoint)
    cfg = model.cfg
    if args.revise is not None:
        cfg.postprocess.revise = args.revise
    if args.score_threshold is not None:
        cfg.postprocess.score_threshold = args.score_threshold
    with Image.open(args.image) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    h, w = pixels.shape[:2]
    boxed, scale = letterbox(pixels, cfg.train.input_size)
    dtype = next(model.parameters()).dtype
    tensor = torch.from_numpy(boxed.transpose(2, 0, 1).copy()).to(dtype)
    dets = infer_image(model, tensor, cfg.postprocess, args.image_id, image_size=(w * scale, h * scale)).scaled(1 / scale)
    cat_ids = {int(k): int(v) for k, v in ckpt.meta.get("category_ids", {}).items()} or None
    results = to_coco_results([dets], cat_ids)
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=1)
    print(f"{len(results)} detections -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, load_results

    manifest = load_coco(args.gt)
    metrics = evaluate(load_results(args.dets, manifest), manifest)
    metrics.save(args.out)
    print(json.dumps(metrics.overall))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .report import plot_ablation_metrics, plot_loss_curves

    cfg = _config(args)
    manifest = load_coco(args.data, args.images)
    cfg.head.num_classes = manifest.num_classes
    eval_manifest = load_coco(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_ablation(cfg, manifest, eval_manifest, out / "runs")
    report.write_csv(out / "ablation.csv")
    report.write_json(out / "ablation.json")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    plot_ablation_metrics(report.rows, figs / "ablation_metrics.png")
    plot_loss_curves(report.loss_curves, figs / "loss_curves.png")
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_render(args) -> int:
    from .render import render_detections

    with open(args.dets) as fh:
        results = json.load(fh)
    names = None
    if args.gt:
        manifest = load_coco(args.gt)
        names = {manifest.original_category(c): n for c, n in manifest.categories.items()}
    dets = [
        Detection((r["bbox"][0], r["bbox"][1], r["bbox"][0] + r["bbox"][2], r["bbox"][1] + r["bbox"][3]), int(r["category_id"]), float(r["score"]))
        for r in results
        if args.image_id is None or int(r["image_id"]) == args.image_id
        if float(r["score"]) >= args.min_score
    ]
    render_detections(args.image, dets, args.out, names)
    print(f"rendered {len(dets)} detections -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psrp", description="Anchor-free detector with a shared encoder-decoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    sp = sub.add_parser("synth-data", help="generate the synthetic shapes dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-images", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", help="SynthConfig YAML file")
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train a detector")
    with_config(sp)
    sp.add_argument("--data", required=True, help="COCO annotation JSON")
    sp.add_argument("--images", help="image root (defaults to the JSON's directory)")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="detect objects in one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--image-id", type=int, default=0)
    sp.add_argument("--revise", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--score-threshold", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="COCO-style evaluation of a results file")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--dets", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare methods A/B/C/OURS")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--images")
    sp.add_argument("--eval-data", help="COCO JSON to evaluate on (defaults to --data)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("render", help="draw detections onto an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--dets", required=True, help="COCO results JSON")
    sp.add_argument("--image-id", type=int)
    sp.add_argument("--gt", help="COCO JSON for category names")
    sp.add_argument("--min-score", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PsrpError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
