"""Figures written next to the reports: sweep curves and data distribution."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from selfscreen.data import DatasetStats  # noqa: E402

METRIC_TITLES = (("precision", "Precision"), ("recall", "Recall"), ("f1", "F1-score"),
                 ("auc", "AUC"), ("accuracy", "Accuracy"))

# PNG metadata fixed so that identical inputs give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, metadata=_PNG_META if path.suffix.lower() == ".png" else None)
    plt.close(fig)
    return path


def plot_sweep(
    curves: Mapping[str, Sequence],
    path: str | Path,
    reference: Mapping[str, float] | None = None,
) -> Path:
    """One panel per metric, hidden units on a log2 axis, one line per model.

    ``curves`` maps a model name to its ``SweepResult`` list; ``reference``
    gives a dashed horizontal line per metric (fractions in [0, 1]).
    """
    fig, axes = plt.subplots(1, len(METRIC_TITLES), figsize=(16, 3.4), sharex=True)
    for ax, (key, title) in zip(axes, METRIC_TITLES):
        for name, results in curves.items():
            pts = [(r.h, 100 * getattr(r.metrics, key)) for r in results
                   if r.metrics is not None and getattr(r.metrics, key) is not None]
            if pts:
                hs, vals = zip(*pts)
                ax.plot(hs, vals, marker="o", ms=4, lw=1.4, label=name)
        if reference and reference.get(key) is not None:
            ax.axhline(100 * reference[key], ls="--", lw=1, color="0.4")
        ax.set_xscale("log", base=2)
        ax.set_title(title)
        ax.set_xlabel("hidden units h")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("%")
    axes[-1].legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_distribution(stats: DatasetStats, path: str | Path) -> Path:
    """Samples-per-subject histogram beside the negative/positive class counts."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2))
    counts = sorted(stats.histogram)
    left.bar(counts, [stats.histogram[c] for c in counts], color="tab:blue")
    left.set_xlabel("samples per subject")
    left.set_ylabel("subjects")
    left.set_xticks(counts)
    left.set_title(f"{stats.n_samples} samples, {stats.n_subjects} subjects")
    bars = right.bar(["negative\n(PHQ-4 < 6)", "positive\n(PHQ-4 >= 6)"],
                     [stats.n_negative, stats.n_positive], color=["tab:green", "tab:red"])
    right.bar_label(bars)
    right.set_ylabel("samples")
    right.set_title("class balance")
    fig.tight_layout()
    return _save(fig, path)
