"""Raster figures of the analysis artifacts (PNG via matplotlib's Agg backend).

The SVG emitters are the byte-stable record; these are for quick viewing.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import EmitError  # noqa: E402
from .emit import CANVAS_H, CANVAS_W, squarify  # noqa: E402


def _save(fig, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.savefig(path, dpi=100, metadata={"Software": None})
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def plot_exposure(stats, split=None, path="exposure.png"):
    top = {s.news_id for s in split.top} if split else set()
    fig, ax = plt.subplots(figsize=(10, 6))
    for group, color, label in ((False, "tab:blue", "other articles"), (True, "tab:red", "top by clicks")):
        pts = [s for s in stats if (s.news_id in top) == group]
        if not pts:
            continue
        ax.scatter([s.total_impressions for s in pts], [s.total_clicks for s in pts],
                   s=[8 + 80 * s.ctr for s in pts], c=color, alpha=0.5, label=label, linewidths=0)
    ax.set_xlabel("total impressions")
    ax.set_ylabel("total clicks")
    ax.legend(loc="upper left")
    fig.tight_layout()
    return _save(fig, path)


def plot_distribution(comp, path="distribution.png"):
    fig, axes = plt.subplots(2, 1, figsize=(10, 12))
    cmap = plt.get_cmap("tab20")
    colors = {s: cmap(i % 20) for i, s in enumerate(comp.subcategories)}
    for ax, (name, counts) in zip(axes, (("clicked", comp.ground_truth),
                                         (f"recommended (top {comp.top_n})", comp.recommended))):
        labels = [s for s in comp.subcategories if counts.get(s, 0) > 0]
        for s, (x, y, w, h) in zip(labels, squarify([counts[s] for s in labels], 0, 0, CANVAS_W, CANVAS_H)):
            ax.add_patch(plt.Rectangle((x, CANVAS_H - y - h), w, h, facecolor=colors[s], edgecolor="white"))
            if w > 60 and h > 30:
                ax.text(x + 4, CANVAS_H - y - 16, f"{s} ({counts[s]})", fontsize=8, color="black")
        ax.set_xlim(0, CANVAS_W)
        ax.set_ylim(0, CANVAS_H)
        ax.set_axis_off()
        ax.set_title(f"{name}: {sum(counts.values())}")
    fig.tight_layout()
    return _save(fig, path)
