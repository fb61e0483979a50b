"""SGD training loop with resumable, deterministic checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import DatasetManifest, prepare_image
from .errors import ContractError, DivergenceError
from .losses import LossBreakdown, total_loss
from .model import Detector, build_model

log = logging.getLogger(__name__)


def torch_dtype(cfg: ExperimentConfig) -> torch.dtype:
    return torch.float64 if cfg.train.dtype == "float64" else torch.float32


@torch.no_grad()
def sgd_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor | None],
    velocity: list[torch.Tensor],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place momentum SGD: v <- m*v + g + wd*p ; p <- p - lr*v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ContractError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        step = p * weight_decay if g is None else g + weight_decay * p
        v.mul_(momentum).add_(step)
        p.sub_(lr * v)


@dataclass
class TrainState:
    model: Detector
    velocity: dict[str, torch.Tensor]
    iteration: int = 0

    @classmethod
    def fresh(cls, cfg: ExperimentConfig) -> "TrainState":
        model = build_model(cfg)
        return cls(model, {n: torch.zeros_like(p) for n, p in model.named_parameters()})

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        blobs = {f"model/{n}": p.detach().cpu().numpy().copy() for n, p in self.model.named_parameters()}
        blobs.update({f"velocity/{n}": v.cpu().numpy().copy() for n, v in self.velocity.items()})
        blobs["rng/torch"] = torch.get_rng_state().numpy().copy()
        return Checkpoint(self.model.cfg.to_dict(), self.iteration, blobs, dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, stage_source=None) -> "TrainState":
        cfg = ExperimentConfig.from_dict(ckpt.config).validate()
        model = build_model(cfg, stage_source=stage_source)
        load_parameters(model, ckpt)
        velocity = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        for n, v in ckpt.tensors("velocity/").items():
            velocity[n].copy_(v)
        if "rng/torch" in ckpt.blobs:
            torch.set_rng_state(torch.from_numpy(ckpt.blobs["rng/torch"].copy()))
        return cls(model, velocity, ckpt.iteration)


def load_parameters(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    stored = ckpt.tensors("model/")
    missing = sorted(set(params) - set(stored))
    if missing:
        raise ContractError(f"checkpoint lacks parameters {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(stored[name].shape) != tuple(p.shape):
                raise ContractError(f"parameter {name} has shape {tuple(stored[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(stored[name])


def load_model(path: str | os.PathLike, stage_source=None) -> tuple[Detector, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(ckpt.config).validate()
    model = build_model(cfg, stage_source=stage_source)
    load_parameters(model, ckpt)
    return model, ckpt


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


class ImageCache:
    """Letterboxed tensors per manifest index, prepared on first use."""

    def __init__(self, manifest: DatasetManifest, size: int, dtype: torch.dtype):
        self.manifest, self.size, self.dtype = manifest, size, dtype
        self._items: dict[int, tuple] = {}

    def __getitem__(self, i: int):
        if i not in self._items:
            self._items[i] = prepare_image(self.manifest, self.manifest.images[i], self.size, self.dtype)
        return self._items[i]


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Image indices of 0-based ``iteration``: epoch-wise seeded permutations, last batch partial."""
    per_epoch = math.ceil(n / batch_size)
    epoch, j = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[j * batch_size : (j + 1) * batch_size]


def assignment_mode(cfg: ExperimentConfig, iteration: int) -> str:
    start = cfg.assign.semantic_start_fraction * cfg.train.iterations
    return "semantic" if iteration >= start else "static"


@dataclass
class TrainResult:
    state: TrainState
    records: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def manifest_meta(manifest: DatasetManifest) -> dict:
    return {
        "categories": {str(k): v for k, v in manifest.categories.items()},
        "category_ids": {str(k): v for k, v in manifest.category_ids.items()},
    }


def train(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | Checkpoint | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.train.iterations`` SGD steps, logging one JSON line per step.

    With ``out_dir``, writes ``loss_log.jsonl``, ``ckpt_<iter>.psrp`` every
    ``checkpoint_every`` steps and ``last.psrp`` at the end. ``resume``
    continues from a checkpoint; the continuation is bit-identical to an
    uninterrupted run in deterministic mode.
    """
    cfg.validate()
    tc = cfg.train
    set_determinism(tc.deterministic)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        state = TrainState.from_checkpoint(ckpt)
        # the checkpoint's config governs the model; run length may be extended
        state.model.cfg.train.iterations = tc.iterations
        cfg = state.model.cfg
    else:
        torch.manual_seed(tc.seed)
        state = TrainState.fresh(cfg)
    model = state.model
    model.train()
    dtype = torch_dtype(cfg)
    cache = ImageCache(manifest, tc.input_size, dtype)
    ranges = cfg.assign.scaled_ranges(tc.input_size)
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    velocity = [state.velocity[n] for n in names]
    meta = manifest_meta(manifest)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss_log.jsonl", "a" if resume is not None else "w")
    result = TrainResult(state)
    try:
        for it in range(state.iteration, tc.iterations):
            idx = batch_indices(len(manifest.images), tc.batch_size, tc.seed, it)
            items = [cache[int(i)] for i in idx]
            images = torch.stack([x[0] for x in items])
            mode = assignment_mode(cfg, it)
            outputs = model(images)
            try:
                loss = total_loss(outputs, [x[1] for x in items], [x[2] for x in items], ranges, cfg.loss, mode)
            except ContractError as exc:
                # margins collapsing to zero is divergence seen through exp underflow
                raise DivergenceError(it + 1) from exc
            if not torch.isfinite(loss.total):
                raise DivergenceError(it + 1)
            for p in params:
                p.grad = None
            loss.total.backward()
            sgd_step(params, [p.grad for p in params], velocity, tc.lr, tc.momentum, tc.weight_decay)
            state.iteration = it + 1
            record = {"iter": it + 1, "mode": mode, **loss.as_dict()}
            result.records.append(record)
            if log_fh is not None and (state.iteration % max(tc.log_every, 1) == 0 or state.iteration == tc.iterations):
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(state.iteration, loss)
            if state.iteration % 100 == 0:
                log.info("iter %d total %.4f", state.iteration, record["total"])
            if out is not None and tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0:
                path = out / f"ckpt_{state.iteration:06d}.psrp"
                save_checkpoint(state.to_checkpoint(meta), path)
                result.checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        path = out / "last.psrp"
        save_checkpoint(state.to_checkpoint(meta), path)
        result.checkpoints.append(path)
    return result
