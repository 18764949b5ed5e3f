"""Matplotlib renderings emitted next to the delimited report files.

Every function writes a single PNG and closes its figure; the Agg backend
keeps this headless-safe. These are presentation artifacts only; the
machine-readable outputs remain the graymap/CSV/JSON files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_heatmap(grid: np.ndarray, title: str, path: str) -> str:
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
    ax.set_title(title, fontsize=10)
    ax.set_xticks(range(grid.shape[1]))
    ax.set_yticks(range(grid.shape[0]))
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_training_curves(metrics: list[dict], path: str) -> str:
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(steps, [m["l_text"] for m in metrics], label="l_text")
    ax1.plot(steps, [m["total"] for m in metrics], label="total", alpha=0.7)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("text / total loss", fontsize=10)
    ax2.plot(steps, [m["l_image"] for m in metrics], color="tab:red")
    ax2.set_xlabel("step")
    ax2.set_title("image alignment loss", fontsize=10)
    if any(m["l_image"] > 0 for m in metrics):
        ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_chart(rows: list[dict], value_key: str, metric_keys: list[str],
                       path: str) -> str:
    labels = [str(r[value_key]) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    width = 0.8 / max(1, len(metric_keys))
    for i, key in enumerate(metric_keys):
        ax.bar(x + i * width, [float(r[key]) for r in rows], width, label=key)
    ax.set_xticks(x + width * (len(metric_keys) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_xlabel(value_key)
    ax.legend(fontsize=8)
    ax.set_title(f"sweep over {value_key}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
