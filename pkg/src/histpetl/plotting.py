"""Figures for the report command, rendered headless to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "font.size": 10,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # a fixed metadata block keeps PNG bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(curves: dict[str, list[dict]], path) -> Path:
    """Train (dashed) and validation (solid) loss per run, one colour per method.

    ``curves`` maps a method label to a list of runs, each a dict with
    ``train_loss`` and ``val_loss`` sequences.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i, (label, runs) in enumerate(curves.items()):
            colour = colours[i % len(colours)]
            for j, run in enumerate(runs):
                epochs = range(1, len(run["val_loss"]) + 1)
                ax.plot(epochs, run["train_loss"], "--", color=colour, alpha=0.6, lw=1)
                ax.plot(epochs, run["val_loss"], "-", color=colour, lw=1.5,
                        label=label if j == 0 else None)
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax.set_title("Loss convergence (solid: validation, dashed: train)")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_accuracy(summary: list[dict], path) -> Path:
    """Mean test accuracy with one standard deviation per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [row["method"] for row in summary]
        means = [100 * row["mean_accuracy"] for row in summary]
        stds = [100 * row["std_accuracy"] for row in summary]
        ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("test accuracy (%)")
        ax.set_ylim(0, 100)
        fig.tight_layout()
        return _save(fig, path)


def plot_similarity(series: dict[str, list[float]], path) -> Path:
    """Per-block CKA score of each candidate against a common reference."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, scores in series.items():
            ax.plot(range(1, len(scores) + 1), scores, marker="o", label=label)
        ax.set_xlabel("block")
        ax.set_ylabel("linear CKA")
        ax.set_ylim(0, 1.05)
        ax.set_title("Layer-wise feature similarity")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
