"""Figure rendering for training, threshold, episode, and benchmark reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import BENCH_POLICIES


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(history: dict, path, title: str) -> Path:
    """Per-epoch train and validation loss curves on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(history["train_mse"]) + 1)
    ax.plot(epochs, history["train_mse"], label="train")
    ax.plot(epochs, history["val_mse"], label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean squared error")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_roc(report, path) -> Path:
    """ROC candidate sweep with the selected threshold marked."""
    pts = sorted(report.roc_points, key=lambda p: p[0])
    fpr = [p[0] for p in pts]
    tpr = [p[1] for p in pts]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, marker="o", ms=3, label="candidates")
    ax.plot([0, 1], [0, 1], ls="--", color="gray", lw=1, label="chance")
    chosen = min(
        report.roc_points,
        key=lambda p: abs(p[2] - report.te),
    )
    ax.plot([chosen[0]], [chosen[1]], marker="*", ms=14, color="red",
            label=f"te (J={report.chosen_j:.3f})")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("stability threshold selection")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_episode_trace(result, path) -> Path:
    """Angle, grip force, log-density, and fill traces for one episode."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    t_s = result.t_tick / 160.0
    axes[0].plot(t_s, result.theta_deg, label="theta (deg)")
    axes[0].set_ylabel("theta (deg)")
    axes[1].plot(t_s, result.force_n, label="grip force (N)", color="tab:orange")
    ax_fill = axes[1].twinx()
    ax_fill.plot(t_s, result.fill_g, label="fill (g)", color="tab:blue", alpha=0.6)
    ax_fill.set_ylabel("fill (g)")
    axes[1].set_ylabel("force (N)")
    finite = np.isfinite(result.log_likelihood)
    axes[2].plot(t_s[finite], result.log_likelihood[finite], color="tab:green")
    axes[2].set_ylabel("log density")
    axes[2].set_xlabel("time (s)")
    for tick in result.adapted_ticks:
        axes[0].axvline(tick / 160.0, color="purple", alpha=0.2, lw=0.8)
    if result.drop_tick is not None:
        for ax in axes:
            ax.axvline(result.drop_tick / 160.0, color="red", ls="--", lw=1)
    axes[0].set_title(
        f"{result.object_name} (seed {result.seed}): "
        + ("dropped" if result.dropped else "held")
    )
    return _finish(fig, path)


def plot_bench_comparison(results, path) -> Path:
    """Grouped bars of supported grams per object and policy arm."""
    names = [r.object_name for r in results]
    arms = [p for p in BENCH_POLICIES if all(p in r.max_grams for r in results)]
    x = np.arange(len(names))
    width = 0.8 / max(1, len(arms))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    for i, arm in enumerate(arms):
        vals = [r.max_grams[arm] for r in results]
        ax.bar(x + (i - (len(arms) - 1) / 2) * width, vals, width, label=arm)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("max supported added mass (g)")
    ax.set_title("supported weight by policy")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)
