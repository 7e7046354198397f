"""CSV tables and matplotlib figures written next to them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def plot_loss_curve(history: Sequence[dict], path) -> Path:
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["total"] for r in history], lw=1.5, label="total")
    for key in ("start", "end", "cls", "reg"):
        ax.plot(steps, [r[key] for r in history], lw=0.8, alpha=0.7, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_map_table(per_threshold: Mapping[float, float], path, title: str = "") -> Path:
    th = list(per_threshold)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([f"{t:.2f}" for t in th], [per_threshold[t] for t in th], color="0.4")
    ax.set_ylim(0, 1)
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("mAP")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_heatmaps(maps: Dict[str, np.ndarray], path, xlabel="key", ylabel="query") -> Path:
    fig, axes = plt.subplots(1, len(maps), figsize=(3.2 * len(maps), 3), squeeze=False)
    for ax, (name, m) in zip(axes[0], maps.items()):
        im = ax.imshow(m, cmap="viridis", origin="upper")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_frame_attention(path, records) -> None:
    """``records``: iterable of ``(video, layer, {group: (T, T) weights})``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "layer", "group", "query", "key", "weight"])
        for video, layer, groups in records:
            for group, m in groups.items():
                qi, ki = np.nonzero(m)
                for q, k in zip(qi, ki):
                    w.writerow([video, layer, group, int(q), int(k), f"{m[q, k]:.8g}"])


def write_proposal_attention(path, records) -> None:
    """``records``: iterable of ``(video, (T, T) averaged map)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "start", "end", "weight"])
        for video, m in records:
            for i, j in zip(*np.nonzero(m)):
                w.writerow([video, int(i), int(j), f"{m[i, j]:.8g}"])


def write_map_table(path, per_threshold: Mapping[float, float], average: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tiou", "mAP"])
        for t, v in per_threshold.items():
            w.writerow([f"{t:.2f}", f"{v:.6f}"])
        w.writerow(["average", f"{average:.6f}"])
