"""Report figures rendered to PNG files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .wavelet import decompose, energy_profile  # noqa: E402


def _gray(ax, img):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    ax.imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])


def sample_grid(path, rows: Mapping[str, Sequence[np.ndarray]], n: int = 8) -> Path:
    """One row of images per entry of ``rows`` (e.g. real, coarse, final)."""
    names = list(rows)
    n = min(n, min(len(rows[k]) for k in names))
    fig, axes = plt.subplots(len(names), n, figsize=(1.2 * n, 1.3 * len(names)), squeeze=False)
    for r, name in enumerate(names):
        for c in range(n):
            _gray(axes[r, c], rows[name][c])
        axes[r, 0].set_ylabel(name, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def energy_plot(path, sets: Mapping[str, Sequence[np.ndarray]], depth: int) -> Path:
    """Mean fraction of energy per subband plane for each image set."""
    fig, ax = plt.subplots(figsize=(6, 3))
    keys: List[str] = []
    width = 0.8 / max(len(sets), 1)
    for i, (name, images) in enumerate(sets.items()):
        profiles = [energy_profile(decompose(im, depth)) for im in images]
        keys = list(profiles[0])
        mean = np.array([np.mean([p[k] for p in profiles]) for k in keys])
        ax.bar(np.arange(len(keys)) + i * width, mean, width, label=name)
    ax.set_xticks(np.arange(len(keys)) + width * (len(sets) - 1) / 2)
    ax.set_xticklabels(keys, fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("energy fraction")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def metrics_plot(path, report: Dict[str, float]) -> Path:
    vals = {k: v for k, v in report.items() if isinstance(v, (int, float)) and k != "n" and np.isfinite(v)}
    fig, ax = plt.subplots(figsize=(5, 2.5))
    ax.barh(list(vals), list(vals.values()))
    for y, v in enumerate(vals.values()):
        ax.text(v, y, f" {v:.4g}", va="center", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
