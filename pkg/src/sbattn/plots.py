"""Figure output for the experiment commands: line charts for training
curves and length sweeps, heatmaps for attention maps.

Everything renders through the Agg backend straight to a file, so the CLI
stays headless; figures sit next to the CSVs they visualize and never feed
back into them. A fixed svg.hashsalt and stripped date metadata keep the
SVG bytes reproducible run to run.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "sbattn"

_METADATA = {"Date": None}


def line_chart(path, series: dict, xlabel: str, ylabel: str, title: str = "",
               logx: bool = False, logy: bool = False) -> str:
    """series maps a legend label to (xs, ys). Returns the written path."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), constrained_layout=True)
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2, label=str(label))
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return str(path)


def heatmap(path, matrix, title: str = "", xlabel: str = "key position",
            ylabel: str = "query position", tick_labels=None) -> str:
    """Attention-map rendering; tick_labels (one per position) are drawn on
    both axes when the matrix is small enough to keep them legible."""
    m = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(5.6, 5.0), constrained_layout=True)
    vmax = max(float(m.max()), 1e-12)
    im = ax.imshow(m, origin="upper", aspect="equal", cmap="viridis",
                   vmin=0.0, vmax=vmax, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8)
    if tick_labels is not None and len(tick_labels) <= 40:
        pos = np.arange(len(tick_labels))
        ax.set_xticks(pos, [str(t) for t in tick_labels], fontsize=6, rotation=90)
        ax.set_yticks(pos, [str(t) for t in tick_labels], fontsize=6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return str(path)
