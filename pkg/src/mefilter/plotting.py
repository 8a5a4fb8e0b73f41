"""Colormapped disparity figures and error curves written as PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_disparity_figure(path, estimate, truth=None, cmap: str = "magma", dpi: int = 100, title: str = "") -> None:
    """Estimate (and optionally ground truth and absolute error) side by side.

    Both disparity panels share one color range so they compare directly.
    """
    est = np.asarray(estimate, dtype=float)
    panels = [("estimate", est)]
    if truth is not None:
        gt = np.asarray(truth, dtype=float)
        panels += [("ground truth", gt), ("abs error", np.abs(est - gt))]
    finite = np.concatenate([p[np.isfinite(p)].ravel() for _, p in panels[:2]])
    vmin, vmax = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.0), squeeze=False)
    for ax, (name, img) in zip(axes[0], panels):
        if name == "abs error":
            im = ax.imshow(img, cmap="viridis")
        else:
            im = ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)


def save_error_curve(path, values, ylabel: str, dpi: int = 100) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(np.arange(len(values)), values, marker="o", ms=3)
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
