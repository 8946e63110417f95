"""Optional PNG figures next to the CSV outputs.

matplotlib is imported lazily so the library and the CSV-only CLI paths work
without it.
"""

from __future__ import annotations

import numpy as np

from cadapter.errors import UnsupportedError


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise UnsupportedError("--plot needs matplotlib (pip install 'artifact[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_histogram(path, edges, correct, incorrect, title: str = "") -> None:
    plt = _pyplot()
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = np.diff(edges)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(centers, correct, width=width, alpha=0.6, label="true label")
    ax.bar(centers, incorrect, width=width, alpha=0.6, label="random label")
    ax.set_xlabel("non-conformity score")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trace(path, trace) -> None:
    """Per-iteration loss and logged validation size."""
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(np.arange(1, len(trace.losses) + 1), trace.losses, lw=0.8)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("training loss")
    its = [r["iteration"] for r in trace.rows]
    sizes = [r["val_size"] for r in trace.rows]
    if trace.initial is not None:
        its = [0] + its
        sizes = [trace.initial["val_size"]] + sizes
    ax2.plot(its, sizes, marker="o", ms=3)
    ax2.axvline(trace.best_iteration, color="grey", ls="--", lw=0.8)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("validation size")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
