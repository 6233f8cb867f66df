"""Figures written next to the CSV outputs of ``train`` and ``eval``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_losses(rows: list[dict], path) -> None:
    """Per-iteration loss components on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4))
    it = [r["iteration"] for r in rows]
    for key in ("L_V", "L_FS", "L_SS", "L_N", "L"):
        vals = np.array([r[key] for r in rows], float)
        ax.plot(it, np.maximum(vals, 1e-12), label=key, lw=2 if key == "L" else 1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, ncol=5, fontsize=8)
    _save(fig, path)


def plot_iou(rows: list[dict], curves: dict, path) -> None:
    """Per-item IoU against the coarse-body baseline, and the z-shift curves."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    ids = [str(r["id"]) for r in rows]
    x = np.arange(len(rows))
    a.bar(x - 0.2, [r["baseline_iou"] for r in rows], 0.4, label="coarse body")
    a.bar(x + 0.2, [r["iou"] for r in rows], 0.4, label="prediction")
    a.set_xticks(x, ids, rotation=90, fontsize=7)
    a.set_ylim(0, 1)
    a.set_ylabel("z-shift IoU")
    a.legend(frameon=False)
    for key, (shifts, curve) in curves.items():
        b.plot(shifts, curve, lw=1, label=str(key))
    b.set_xlabel("z shift (voxels)")
    b.set_ylabel("IoU")
    _save(fig, path)


def plot_normals(target: np.ndarray, raw: np.ndarray | None, refined: np.ndarray, path) -> None:
    """Side-by-side normal maps (rows flipped so +y is up)."""
    panels = [("ground truth", target)] + ([("projected", raw)] if raw is not None else []) + [("refined", refined)]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 4))
    for ax, (title, n) in zip(np.atleast_1d(axes), panels):
        ax.imshow(np.clip((np.asarray(n)[::-1] + 1) / 2, 0, 1))
        ax.set_title(title)
        ax.axis("off")
    _save(fig, path)
