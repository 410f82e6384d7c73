"""Matplotlib figures written next to the JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def training_curves(history: Sequence, path) -> Path:
    """Loss terms and held-out accuracy per epoch."""
    epochs = [m.epoch for m in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("total", "L_C", "L_R", "L_V", "L_S"):
        ax1.plot(epochs, [getattr(m, name) for m in history], label=name)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=7)
    ax2.plot(epochs, [m.holdout_accuracy for m in history], marker="o", ms=3)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out accuracy")
    ax2.set_ylim(0, 1)
    return _save(fig, path)


def position_accuracy(report: dict, path) -> Path:
    """Accuracy by premise position, plus the per-video SHD histogram when present."""
    hits: dict[int, list[int]] = {}
    for row in report["per_video"]:
        for k, (p, g) in enumerate(zip(row["predicted"], row["relation"]), 1):
            hits.setdefault(k, []).append(int(p == g))
    shds = [row["shd"] for row in report["per_video"] if "shd" in row]
    fig, axes = plt.subplots(1, 2 if shds else 1, figsize=(9 if shds else 4.5, 3.5), squeeze=False)
    ks = sorted(hits)
    axes[0, 0].bar(ks, [np.mean(hits[k]) for k in ks])
    axes[0, 0].axhline(report["accuracy"], color="k", ls="--", lw=1, label="overall")
    axes[0, 0].set_xlabel("premise index k")
    axes[0, 0].set_ylabel("accuracy")
    axes[0, 0].set_ylim(0, 1)
    axes[0, 0].legend(fontsize=7)
    if shds:
        axes[0, 1].hist(shds, bins=np.arange(max(shds) + 2) - 0.5)
        axes[0, 1].set_xlabel("SHD per video")
        axes[0, 1].set_ylabel("videos")
    return _save(fig, path)


def baseline_bars(reports: dict[str, dict], path) -> Path:
    names = list(reports)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(names, [reports[n]["accuracy"] for n in names])
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.tick_params(axis="x", labelsize=8)
    return _save(fig, path)


def perturbation_counts(counts: Sequence[int], what: str, path) -> Path:
    """Histogram of how many items each video had perturbed."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    counts = np.asarray(counts, dtype=int)
    top = int(counts.max()) if counts.size else 0
    ax.hist(counts, bins=np.arange(top + 2) - 0.5)
    ax.set_xlabel(f"{what} changed per video")
    ax.set_ylabel("videos")
    return _save(fig, path)


def diagram_heatmap(edges: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    n = edges.shape[0]
    ax.imshow(edges, cmap="Greys", vmin=0, vmax=1)
    ax.set_xticks(range(n), [f"e{i}" for i in range(1, n + 1)])
    ax.set_yticks(range(n), [f"e{i}" for i in range(1, n + 1)])
    ax.set_xlabel("effect")
    ax.set_ylabel("cause")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
