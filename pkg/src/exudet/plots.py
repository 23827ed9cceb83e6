"""Static PNG renderings of training curves and confusion matrices."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .metrics import ConfusionMatrix


def accuracy_curve(logs: Sequence, dest: str) -> None:
    """Train/validation accuracy per epoch from a list of EpochLog entries."""
    epochs = [log.epoch for log in logs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [log.train_acc for log in logs], label="train", color="tab:blue")
    ax.plot(epochs, [log.val.accuracy for log in logs], label="validation",
            color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(dest)
    plt.close(fig)


def confusion_png(matrix: ConfusionMatrix, dest: str) -> None:
    """2x2 confusion heatmap, Normal/Exudate on both axes, counts annotated."""
    grid = [[matrix.tn, matrix.fp],
            [matrix.fn, matrix.tp]]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(grid, cmap="Blues")
    labels = ["Normal", "Exudate"]
    ax.set_xticks([0, 1], labels)
    ax.set_yticks([0, 1], labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    threshold = max(max(row) for row in grid) / 2 or 1
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(grid[i][j]), ha="center", va="center",
                    color="white" if grid[i][j] > threshold else "black")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(dest)
    plt.close(fig)
