"""Matplotlib renderings of run artifacts (PNG files next to the CSV output).

Uses the Agg backend so rendering works headless; nothing here affects the
numeric outputs, which stay authoritative in the CSV/PGM files.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .clustering import ProximityMatrix  # noqa: E402
from .reports import RoundRecord  # noqa: E402


def save_heatmap(matrix: ProximityMatrix, path: str | os.PathLike, title: str = "") -> None:
    """Distance heatmap; lighter cells are closer pairs, matching the PGM."""
    fig, ax = plt.subplots(figsize=(5, 4.2))
    image = ax.imshow(matrix.entries, cmap="gray_r", interpolation="nearest")
    ax.set_xlabel("client")
    ax.set_ylabel("client")
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax, label="distance")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_round_curves(records: list[RoundRecord], path: str | os.PathLike) -> None:
    """Per-cluster training loss and test accuracy across rounds."""
    by_cluster: dict[int, list[RoundRecord]] = {}
    for r in records:
        by_cluster.setdefault(r.cluster_id, []).append(r)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 4))
    for k in sorted(by_cluster):
        rows = sorted(by_cluster[k], key=lambda r: r.round_index)
        rounds = [r.round_index for r in rows]
        ax_loss.plot(rounds, [r.train_loss for r in rows], marker="o", label=f"cluster {k}")
        if any(not math.isnan(r.test_acc_global) for r in rows):
            ax_acc.plot(
                rounds,
                [r.test_acc_global for r in rows],
                marker="o",
                label=f"cluster {k} (global)",
            )
        if any(not math.isnan(r.test_acc_local) for r in rows):
            ax_acc.plot(
                rounds,
                [r.test_acc_local for r in rows],
                marker="s",
                linestyle="--",
                label=f"cluster {k} (local)",
            )
    ax_loss.set_xlabel("round")
    ax_loss.set_ylabel("train loss")
    ax_loss.legend(fontsize=8)
    ax_acc.set_xlabel("round")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    if ax_acc.lines:
        ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_comparison_chart(
    rows: list[dict], path: str | os.PathLike
) -> None:
    """Grouped bars of final accuracies (mean with std error bars) per run.

    Each row needs: label, mean_acc_global, std_acc_global, mean_acc_local,
    std_acc_local; nan means are drawn as zero-height bars.
    """
    labels = [row["label"] for row in rows]
    positions = range(len(rows))
    width = 0.38

    def series(mean_key: str, std_key: str):
        means = [0.0 if math.isnan(row[mean_key]) else row[mean_key] for row in rows]
        stds = [0.0 if math.isnan(row[std_key]) else row[std_key] for row in rows]
        return means, stds

    global_means, global_stds = series("mean_acc_global", "std_acc_global")
    local_means, local_stds = series("mean_acc_local", "std_acc_local")
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 3, 4))
    ax.bar(
        [p - width / 2 for p in positions], global_means, width,
        yerr=global_stds, capsize=4, label="global test",
    )
    ax.bar(
        [p + width / 2 for p in positions], local_means, width,
        yerr=local_stds, capsize=4, label="local test",
    )
    ax.set_xticks(list(positions))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("final accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
