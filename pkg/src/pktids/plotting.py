"""Report figures written to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_confusion(cm, class_names, path, title: str = "Confusion matrix") -> Path:
    """Heatmap of row-normalised counts, annotated with raw counts."""
    cm = np.asarray(cm)
    totals = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, totals, out=np.zeros(cm.shape, dtype=float), where=totals > 0)
    size = 1.2 + 1.1 * len(class_names)
    fig, ax = plt.subplots(figsize=(size + 1.5, size))
    im = ax.imshow(frac, cmap="Blues", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="row fraction")
    ax.set_xticks(range(len(class_names)), labels=class_names, rotation=30, ha="right")
    ax.set_yticks(range(len(class_names)), labels=class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(report, path, title: str = "Training history") -> Path:
    """Loss and accuracy per epoch for the training and validation splits."""
    epochs = np.arange(1, len(report.train_loss) + 1)
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
    ax_l.plot(epochs, report.train_loss, marker="o", label="train (weighted)")
    ax_l.plot(epochs, report.val_loss, marker="o", label="validation")
    ax_a.plot(epochs, report.train_accuracy, marker="o", label="train")
    ax_a.plot(epochs, report.val_accuracy, marker="o", label="validation")
    if report.best_epoch:
        for ax in (ax_l, ax_a):
            ax.axvline(report.best_epoch, color="grey", linestyle=":", label="best epoch")
    ax_l.set_ylabel("cross-entropy")
    ax_a.set_ylabel("accuracy")
    for ax in (ax_l, ax_a):
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_grid(mean_accuracy: dict, path, best_C=None, title: str = "Linear SVC grid search") -> Path:
    """Mean cross-validated accuracy against C on a log axis."""
    cs = sorted(mean_accuracy)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogx(cs, [mean_accuracy[c] for c in cs], marker="o")
    if best_C is not None:
        ax.axvline(best_C, color="grey", linestyle=":", label=f"best C={best_C:g}")
        ax.legend()
    ax.set_xlabel("C")
    ax.set_ylabel("mean CV accuracy")
    ax.grid(alpha=0.3, which="both")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
