"""Figures written next to the JSON outputs of ``train-demo`` and ``eval``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .edges import edge_target  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(logs: dict, path):
    """Combined loss and held-out boundary-F1 per epoch, one line per arm."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(8, 3))
        for name, train_log in logs.items():
            epochs = [r.epoch for r in train_log.records]
            ax_loss.plot(epochs, [r.combined_loss for r in train_log.records], label=name)
            ax_f1.plot(epochs, [r.boundary_f1 for r in train_log.records], label=name)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("combined loss")
        ax_loss.set_yscale("log")
        ax_f1.set_xlabel("epoch")
        ax_f1.set_ylabel("held-out boundary F1")
        ax_f1.legend(frameon=False)
        return _save(fig, path)


def ablation_bars(report: dict, path):
    arms = report["arms"]
    names = list(arms)
    metrics = ("mIoU", "boundary_f1")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        width = 0.8 / len(names)
        xs = np.arange(len(metrics))
        for i, name in enumerate(names):
            values = [arms[name][m] for m in metrics]
            bars = ax.bar(xs + i * width, values, width, label=f"{name} (λ={arms[name]['lambda_edge']:g})")
            ax.bar_label(bars, fmt="%.3f", fontsize=7)
        ax.set_xticks(xs + width * (len(names) - 1) / 2, metrics)
        ax.set_ylim(0, 1.1)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def _colorize(label_data: np.ndarray, palette: np.ndarray) -> np.ndarray:
    out = np.zeros(label_data.shape + (3,), dtype=np.uint8)
    known = label_data < len(palette)
    out[known] = palette[label_data[known]]
    return out


def prediction_panel(image, truth, predictions: dict, palette, path):
    """Image, ground truth, its edge target, and each arm's prediction."""
    columns = 3 + len(predictions)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, columns, figsize=(2.2 * columns, 2.4))
        axes[0].imshow(image.data)
        axes[0].set_title("image")
        axes[1].imshow(_colorize(truth.data, palette))
        axes[1].set_title("truth")
        axes[2].imshow(edge_target(truth).to_png_array(), cmap="gray", vmin=0, vmax=255)
        axes[2].set_title("edge target")
        for ax, (name, pred) in zip(axes[3:], predictions.items()):
            ax.imshow(_colorize(pred.data, palette))
            ax.set_title(name)
        for ax in axes:
            ax.set_axis_off()
        return _save(fig, path)


def iou_bars(report: dict, path):
    """Per-class IoU bars; undefined classes are left blank."""
    per_class = report["iou_per_class"]
    names = list(per_class)
    values = [np.nan if v is None else v for v in per_class.values()]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.bar(np.arange(len(names)), values, color="tab:blue")
        ax.axhline(report["mIoU_cls"], color="black", lw=0.8, ls="--", label=f"mIoU {report['mIoU_cls']:.3f}")
        ax.set_xticks(np.arange(len(names)), names, rotation=60, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("IoU")
        ax.legend(frameon=False)
        return _save(fig, path)


def confusion_heatmap(counts: np.ndarray, path):
    """Row-normalised confusion matrix (rows = truth)."""
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4.5))
        im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
        ax.set_xlabel("predicted")
        ax.set_ylabel("truth")
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)
