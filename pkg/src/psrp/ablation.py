"""Train and compare the four ablation methods (A, B, C, OURS) with and without revision."""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .attention import AttentionVariant, METHOD_OF
from .config import ExperimentConfig
from .data import DatasetManifest, prepare_image
from .evaluation import METRIC_NAMES, DetRecord, evaluate
from .layers import count_parameters
from .postprocess import infer_batch
from .train import torch_dtype, train

METHODS = {
    "A": {"use_sedam": False, "attention": "none"},
    "B": {"use_sedam": True, "attention": "cbam"},
    "C": {"use_sedam": True, "attention": "cbam_min"},
    "OURS": {"use_sedam": True, "attention": "channel_only"},
}
COLUMNS = ("method", "attention", "revise", *METRIC_NAMES, "params", "train_seconds")


def method_config(base: ExperimentConfig, method: str) -> ExperimentConfig:
    spec = METHODS[method]
    return base.replace(**{"train.use_sedam": spec["use_sedam"], "sedam.attention": spec["attention"]})


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)

    def row(self, method: str, revise: bool) -> dict:
        for r in self.rows:
            if r["method"] == method and r["revise"] == revise:
                return r
        raise KeyError((method, revise))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: ("" if r[k] is None else r[k]) for k in COLUMNS})

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump({"rows": self.rows, "loss_curves": self.loss_curves}, fh, indent=2)


def evaluate_model(model, cfg: ExperimentConfig, manifest: DatasetManifest, revise: bool, batch_size: int = 8):
    post = cfg.postprocess
    post = type(post)(**{**post.__dict__, "revise": revise})
    dtype = torch_dtype(cfg)
    records = []
    for start in range(0, len(manifest.images), batch_size):
        ims = manifest.images[start : start + batch_size]
        items = [prepare_image(manifest, im, cfg.train.input_size, dtype) for im in ims]
        dets = infer_batch(model, torch.stack([x[0] for x in items]), post, [im.id for im in ims])
        for ds, item in zip(dets, items):
            scale = item[3]
            for b, c, s in zip((ds.boxes / scale).tolist(), ds.labels.tolist(), ds.scores.tolist()):
                records.append(DetRecord(ds.image_id, int(c), tuple(b), float(s)))
    return evaluate(records, manifest)


def run_ablation(
    base: ExperimentConfig,
    manifest: DatasetManifest,
    eval_manifest: DatasetManifest | None = None,
    out_dir: str | os.PathLike | None = None,
    methods=tuple(METHODS),
) -> AblationReport:
    """Train every method from the same seed and data; evaluate each with revise on and off."""
    eval_manifest = eval_manifest or manifest
    report = AblationReport()
    for method in methods:
        cfg = method_config(base, method)
        run_dir = Path(out_dir) / method if out_dir is not None else None
        t0 = time.perf_counter()
        result = train(cfg, manifest, run_dir)
        seconds = time.perf_counter() - t0
        model = result.state.model
        report.loss_curves[method] = [r["total"] for r in result.records]
        variant = AttentionVariant(cfg.sedam.attention) if cfg.train.use_sedam else AttentionVariant.NONE
        assert METHOD_OF[variant] == method
        for revise in (True, False):
            metrics = evaluate_model(model, cfg, eval_manifest, revise)
            report.rows.append(
                {
                    "method": method,
                    "attention": variant.value,
                    "revise": revise,
                    **metrics.overall,
                    "params": count_parameters(model),
                    "train_seconds": round(seconds, 2),
                }
            )
    return report
