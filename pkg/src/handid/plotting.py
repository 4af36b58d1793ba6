"""CMC and DET figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from handid.matcher_eval import det_points  # noqa: E402


def plot_cmc(curves, path, max_rank=None):
    """``curves`` maps a label to a CMC vector (rank 1..g)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        curve = np.asarray(curve)
        k = len(curve) if max_rank is None else min(max_rank, len(curve))
        ax.plot(np.arange(1, k + 1), curve[:k], marker=".", label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("identification rate")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_det(genuine, impostor, path, eer=None):
    _, far, frr = det_points(genuine, impostor)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(far, frr, lw=1.5)
    ax.plot([0, 1], [0, 1], ls=":", c="gray", lw=0.8)
    if eer is not None:
        ax.plot([eer], [eer], "o", c="C3", label=f"EER {eer:.3f}")
        ax.legend(loc="upper right")
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("false reject rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
