"""Matplotlib figures for ablation reports and training logs."""
from __future__ import annotations

import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import METRIC_NAMES

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def plot_ablation_metrics(rows: list[dict], path: str | os.PathLike) -> Path:
    """Grouped bars: one group per metric, one bar per (method, revise) row."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(7.5, 3.2))
        n = len(rows)
        width = 0.8 / max(n, 1)
        x = np.arange(len(METRIC_NAMES))
        for i, r in enumerate(rows):
            vals = [np.nan if r.get(k) is None else 100 * r[k] for k in METRIC_NAMES]
            label = f"{r['method']}{' +revise' if r['revise'] else ''}"
            ax.bar(x + (i - (n - 1) / 2) * width, vals, width, label=label, hatch="//" if r["revise"] else None)
        ax.set_xticks(x, METRIC_NAMES)
        ax.set_ylabel("AP (%)")
        ax.legend(ncol=4, fontsize=7, loc="upper center", bbox_to_anchor=(0.5, 1.25))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_loss_curves(curves: dict[str, list[float]], path: str | os.PathLike, smooth: int = 25) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        for name, vals in curves.items():
            v = np.asarray(vals, dtype=float)
            if smooth > 1 and len(v) >= smooth:
                v = np.convolve(v, np.ones(smooth) / smooth, mode="valid")
            ax.plot(np.arange(1, len(v) + 1), v, label=name, lw=1)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def read_loss_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_log(log_path: str | os.PathLike, path: str | os.PathLike) -> Path:
    """Per-component loss curves from a ``loss_log.jsonl`` file."""
    records = read_loss_log(log_path)
    it = [r["iter"] for r in records]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        for key in ("total", "cls", "reg", "center"):
            ax.plot(it, [r[key] for r in records], label=key, lw=1)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
