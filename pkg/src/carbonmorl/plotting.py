"""Figures rendered to image files from results tables."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import aggregate, pareto_front  # noqa: E402

XLABELS = {"fig2": "mean arrival rate (packets/s per user)",
           "fig3": "slot",
           "fig4": "mean delay (s)"}


def plot_results(rows, mode, path):
    """Write the figure for one sweep mode; returns the path."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    agg = aggregate(rows)
    methods = list(dict.fromkeys(a["method"] for a in agg))
    for m in methods:
        pts = [a for a in agg if a["method"] == m]
        ys = [a["emissions_per_bit"][0] for a in pts]
        es = [a["emissions_per_bit"][1] for a in pts]
        if mode == "fig4":
            xs = [a["mean_delay"][0] for a in pts]
            ax.scatter(xs, ys, label=m)
            front = pareto_front(list(zip(xs, ys)))
            ax.plot([xs[i] for i in front], [ys[i] for i in front], "--", lw=1)
        else:
            xs = [a["sweep_value"] for a in pts]
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=m)
    ax.set_xlabel(XLABELS[mode])
    ax.set_ylabel("emissions per bit (kg CO2/bit)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(curves, path):
    path = Path(path)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    epochs = [c["epoch"] for c in curves]
    for ax, key in zip(axes, ("mean_S", "energy_per_bit", "mean_delay")):
        ax.plot(epochs, [c[key] for c in curves])
        ax.set_xlabel("epoch")
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
