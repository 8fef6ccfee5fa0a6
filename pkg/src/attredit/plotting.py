"""Figures for reports. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable bytes across runs: no version stamp in the PNG
PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=PNG_META)
    plt.close(fig)
    return path


def scatter_embedding(coords: np.ndarray, labels: Optional[Sequence[str]], path) -> Path:
    coords = np.asarray(coords)
    labels = list(labels) if labels is not None else ["all"] * len(coords)
    groups = list(dict.fromkeys(labels))
    cmap = plt.get_cmap("tab10")
    fig = plt.figure(figsize=(5, 4.5))
    ax = fig.add_subplot(projection="3d") if coords.shape[1] >= 3 else fig.add_subplot()
    for i, g in enumerate(groups):
        sel = np.array([lab == g for lab in labels])
        pts = coords[sel]
        ax.scatter(*pts.T[: min(3, coords.shape[1])], s=14, color=cmap(i % 10), label=str(g))
    if len(groups) <= 12:
        ax.legend(fontsize=7, loc="best")
    ax.set_title("t-SNE of identity embeddings", fontsize=9)
    return _save(fig, path)


def score_histogram(genuine, impostor, thresholds: dict, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bins = np.linspace(-1, 1, 61)
    ax.hist(impostor, bins=bins, alpha=0.6, density=True, label="impostor", color="tab:gray")
    ax.hist(genuine, bins=bins, alpha=0.6, density=True, label="genuine", color="tab:blue")
    for name, t in thresholds.items():
        if np.isfinite(t):
            ax.axvline(t, ls="--", lw=1, color="tab:red")
            ax.text(t, ax.get_ylim()[1] * 0.9, f" {name}", fontsize=7, color="tab:red")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("density")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def fnmr_bars(rows: Sequence[dict], methods: Sequence[str], path, title: str = "") -> Path:
    """Grouped bars of FNMR at the strict target; ``rows`` come from the report."""
    names = [r["attribute"] for r in rows]
    x = np.arange(len(names))
    width = 0.8 / max(1, len(methods))
    fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(names) + 1), 3.2))
    for i, m in enumerate(methods):
        vals = [r.get(m, np.nan) for r in rows]
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("FNMR @ FMR 0.01%")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def image_grid(images: Sequence[np.ndarray], titles: Sequence[str], path, ncols: int = 6) -> Path:
    n = len(images)
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.4 * ncols, 1.6 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, im, t in zip(axes.flat, images, titles):
        ax.imshow(np.clip(im, 0, 1))
        ax.set_title(t, fontsize=6)
    return _save(fig, path)
