"""Figures for training curves and ablation tables, written straight to files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(curves, path, title="training loss"):
    """``curves`` maps a label to a per-epoch loss list."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label, losses in curves.items():
            ax.plot(np.arange(1, len(losses) + 1), losses, marker=".", label=str(label))
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(title)
        if len(curves) > 1:
            ax.legend()
        return _save(fig, path)


def plot_history(history, path):
    """Loss plus held-out precision / recall / F1 from a training history."""
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.2))
        ep = [h["epoch"] for h in history]
        ax0.plot(ep, [h["loss"] for h in history], marker=".")
        ax0.set_xlabel("epoch")
        ax0.set_ylabel("train loss")
        ax0.set_yscale("log")
        evals = [h for h in history if "f1" in h]
        for key in ("precision", "recall", "f1"):
            ax1.plot([h["epoch"] for h in evals], [h[key] for h in evals], marker=".", label=key)
        ax1.set_xlabel("epoch")
        ax1.set_ylim(0, 1.02)
        ax1.set_ylabel("noise class")
        if evals:
            ax1.legend()
        return _save(fig, path)


def plot_metric_bars(rows, path, level="voxel", title="noise-class metrics"):
    """Grouped precision / recall / F1 bars, averaged over seeds per run name."""
    rows = [r for r in rows if r["level"] == level]
    names = list(dict.fromkeys(r["name"] for r in rows))
    keys = ("precision", "recall", "f1")
    means = np.array([[np.mean([r[k] for r in rows if r["name"] == n]) for k in keys]
                      for n in names]).reshape(len(names), len(keys))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names) + 1.5), 3.2))
        x = np.arange(len(names))
        width = 0.26
        for i, k in enumerate(keys):
            ax.bar(x + (i - 1) * width, means[:, i], width, label=k)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{title} ({level})")
        ax.legend(ncol=3, loc="lower right")
        return _save(fig, path)
