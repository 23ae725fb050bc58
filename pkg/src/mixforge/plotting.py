"""Figures written next to the CSV/JSON outputs of each run."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

if "MPLBACKEND" not in os.environ:
    os.environ["MPLBACKEND"] = "Agg"

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
}
# stripped so identical inputs give identical PNG bytes
PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _to_display(img: torch.Tensor) -> np.ndarray:
    a = img.detach().cpu().float().clamp(0, 1).numpy()
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    return a


def image_grid(images: torch.Tensor, path, ncols: int = 8) -> Path:
    """Plain grid of images (B, C, H, W), min-max scaled for display."""
    images = images.detach().float()
    lo, hi = images.min(), images.max()
    images = (images - lo) / (hi - lo) if hi > lo else images * 0
    n = images.shape[0]
    ncols = min(ncols, n)
    nrows = int(np.ceil(n / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.2 * ncols, 1.2 * nrows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for i in range(n):
            axes.flat[i].imshow(_to_display(images[i]), cmap="gray", vmin=0, vmax=1)
        return _save(fig, path)


def grid_rows(k: int) -> list[str]:
    return (
        [f"input {i + 1}" for i in range(k)]
        + [f"CAM {i + 1}" for i in range(k)]
        + [f"warped {i + 1}" for i in range(k)]
        + [f"mask {i + 1}" for i in range(k)]
        + ["mixed"]
    )


def _stage_panels(display_inputs, mixed, to_display) -> list[list[np.ndarray]]:
    """Rows of panels for every column of a mixed batch; see :func:`grid_rows`."""
    k = mixed.index.shape[1]
    rows = []
    for i in range(k):
        rows.append([_to_display(display_inputs[j]) for j in mixed.index[:, i]])
    for i in range(k):
        rows.append([mixed.cams[c, i].detach().cpu().numpy() for c in range(len(mixed))])
    for i in range(k):
        rows.append([_to_display(to_display(mixed.warped[c, i])) for c in range(len(mixed))])
    for i in range(k):
        rows.append([mixed.masks[c, i].detach().cpu().numpy() for c in range(len(mixed))])
    rows.append([_to_display(to_display(mixed.images[c])) for c in range(len(mixed))])
    return rows


def _draw(rows, labels, col_titles, path) -> Path:
    nrows, ncols = len(rows), len(rows[0])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.1 * ncols + 0.9, 1.1 * nrows), squeeze=False)
        for r, (row, label) in enumerate(zip(rows, labels)):
            heat = label.startswith(("CAM", "mask"))
            for c, panel in enumerate(row):
                ax = axes[r, c]
                ax.imshow(panel, cmap="jet" if heat else "gray", vmin=0, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
                if c == 0:
                    ax.set_ylabel(label, rotation=0, ha="right", va="center")
                if r == 0 and col_titles:
                    ax.set_title(col_titles[c])
        fig.tight_layout()
        return _save(fig, path)


def mixing_grid(display_inputs: torch.Tensor, mixed, path, to_display=lambda x: x) -> tuple[Path, int]:
    """Rows: k inputs, k CAMs, k warped inputs, k masks, mixed result (4k+1).

    ``display_inputs`` are the batch images already mapped to [0, 1];
    ``to_display`` maps normalized tensors (warped, mixed) the same way.
    """
    k = mixed.index.shape[1]
    rows = _stage_panels(display_inputs, mixed, to_display)
    return _draw(rows, grid_rows(k), None, path), len(rows)


def lambda_sweep_grid(display_inputs: torch.Tensor, sweeps: Sequence, lambdas: Sequence[float], path,
                      to_display=lambda x: x) -> Path:
    """One column per coefficient value, each a single-pair mixed batch."""
    k = sweeps[0].index.shape[1]
    per_col = [_stage_panels(display_inputs, m, to_display) for m in sweeps]
    rows = [[col[r][0] for col in per_col] for r in range(4 * k + 1)]
    return _draw(rows, grid_rows(k), [f"λ={v:.1f}" for v in lambdas], path)


def plot_metrics(rows: Sequence[dict], path, title: str | None = None) -> Path:
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax1.plot(epochs, [np.nan if r["train_loss"] is None else r["train_loss"] for r in rows], "-o", ms=2)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss")
        if any(r.get("top1") is not None for r in rows):
            ax2.plot(epochs, [np.nan if r["top1"] is None else r["top1"] for r in rows], "-o", ms=2, label="top-1")
            if any(r.get("top5") is not None for r in rows):
                ax2.plot(epochs, [np.nan if r["top5"] is None else r["top5"] for r in rows], "-s", ms=2, label="top-5")
            ax2.set_ylabel("test accuracy (%)")
            ax2.legend(frameon=False)
        else:
            ax2.plot(epochs, [r["tau"] for r in rows], "-o", ms=2)
            ax2.set_ylabel("temperature τ")
        ax2.set_xlabel("epoch")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_results(rows: Sequence[dict], path, metric: str = "top1") -> Path:
    """Bar chart of mean ± std per strategy."""
    names = [r["strategy"] for r in rows]
    means = [r[f"{metric}_mean"] for r in rows]
    stds = [r[f"{metric}_std"] or 0.0 for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.9 * len(rows), 2.8))
        ax.bar(range(len(rows)), means, yerr=stds, color="0.6", edgecolor="0.2", capsize=3)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(f"{metric} accuracy (%)")
        finite = [m for m in means if m is not None]
        if finite:
            ax.set_ylim(max(0.0, min(finite) - 5), min(100.0, max(finite) + 2))
        fig.tight_layout()
        return _save(fig, path)


def plot_timing(report: dict, path) -> Path:
    methods = report["methods"]
    names = list(methods)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.bar(names, [methods[n]["mean"] for n in names], yerr=[methods[n]["std"] for n in names],
               color=["0.35", "0.75"][: len(names)], capsize=3)
        ax.set_ylabel(f"seconds per batch of {report['batch_size']}")
        ax.set_title(f"{report['trials']} trials, speedup {report['speedup']:.1f}x")
        fig.tight_layout()
        return _save(fig, path)
