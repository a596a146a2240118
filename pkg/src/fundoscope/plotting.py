"""Figures written to files (Agg backend): ROC curves, confusion matrices, maps, histories."""
from __future__ import annotations

from contextlib import contextmanager

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
from PIL import Image  # noqa: E402

LESION_COLORS = {1: "#1f77b4", 2: "#d62728", 3: "#ffbf00"}


@contextmanager
def figure(path, size=(5, 4)):
    """Yield a fresh ``(fig, ax)`` and save it to ``path`` on exit."""
    with plt.rc_context({"font.size": 9, "axes.grid": False, "savefig.dpi": 120}):
        fig, ax = plt.subplots(figsize=size)
        try:
            yield fig, ax
            fig.tight_layout()
            fig.savefig(path, metadata={"Software": None})
        finally:
            plt.close(fig)


def save_rgb(pixels, path):
    """C×H×W (or H×W) uint8-compatible array to PNG."""
    px = np.asarray(pixels)
    if px.ndim == 3:
        px = np.moveaxis(px, 0, -1)
        if px.shape[-1] == 1:
            px = px[..., 0]
    Image.fromarray(np.clip(np.rint(px), 0, 255).astype(np.uint8)).save(path)


def plot_roc(curves, path, title="ROC", operating_points=None):
    """``curves``: mapping name -> RocCurve."""
    with figure(path, (4.5, 4.2)) as (_, ax):
        for name, roc in curves.items():
            ax.plot(roc.fpr, roc.tpr, lw=1.5, label=f"{name} (AUC {roc.auc:.4f})")
        for name, pts in (operating_points or {}).items():
            for pt in pts:
                ax.plot(1 - pt["specificity"], pt["sensitivity"], "o", ms=4, color="k")
        ax.plot([0, 1], [0, 1], ":", color="grey", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        ax.set_title(title)
        ax.legend(loc="lower right", fontsize=8)


def plot_confusion(counts, class_names, path, title="confusion"):
    """Counts with correct predictions in red on the diagonal."""
    counts = np.asarray(counts)
    with figure(path, (4.8, 4.2)) as (_, ax):
        rows = counts.sum(axis=1, keepdims=True)
        frac = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
        ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
        for i in range(counts.shape[0]):
            for j in range(counts.shape[1]):
                ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                        color="red" if i == j else ("white" if frac[i, j] > 0.5 else "black"))
        ax.set_xticks(range(len(class_names)), class_names, rotation=30, ha="right")
        ax.set_yticks(range(len(class_names)), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)


def plot_history(histories, path, title="training"):
    """``histories``: mapping name -> TrainHistory."""
    with figure(path, (6, 3.2)) as (fig, ax):
        ax2 = ax.twinx()
        for name, h in histories.items():
            epochs = np.arange(1, len(h) + 1)
            line, = ax.plot(epochs, h.train_loss, "-", label=f"{name} train loss")
            ax.plot(epochs, h.val_loss, "--", color=line.get_color(), label=f"{name} val loss")
            ax2.plot(epochs, h.val_accuracy, ":", color=line.get_color(), label=f"{name} val acc")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1)
        handles = ax.get_legend_handles_labels()
        h2 = ax2.get_legend_handles_labels()
        ax.legend(handles[0] + h2[0], handles[1] + h2[1], fontsize=7, loc="center right")
        ax.set_title(title)


def plot_heatmap(values, path, title="", vmin=None, vmax=None, cmap="magma"):
    with figure(path, (4.4, 4)) as (fig, ax):
        im = ax.imshow(values, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_axis_off()
        ax.set_title(title)


def plot_lesion_overlay(pixels, L, P, geometry, path, title="", lesions=()):
    """Image with every non-normal window outlined in its class colour (alpha = probability).

    ``lesions`` (ground-truth boxes) are drawn dashed in white.
    """
    img = np.moveaxis(np.asarray(pixels), 0, -1)
    img = np.clip(img, 0, 255).astype(np.uint8)
    with figure(path, (5, 5)) as (_, ax):
        ax.imshow(img)
        for r, c, y0, x0 in geometry.windows():
            cls = int(L[r, c])
            if cls:
                ax.add_patch(Rectangle((x0, y0), geometry.h, geometry.h, fill=False, lw=1,
                                       ec=LESION_COLORS[cls], alpha=float(P[r, c])))
        for l in lesions:
            ax.add_patch(Rectangle((l.x, l.y), l.w, l.h, fill=False, lw=0.8, ec="white", ls="--"))
        ax.set_axis_off()
        ax.set_title(title)


def contact_sheet(images, labels, path, columns=4):
    """Grid of C×H×W uint8 thumbnails with captions."""
    n = len(images)
    rows = max(1, -(-n // columns))
    with figure(path, (2.2 * columns, 2.3 * rows)) as (fig, _):
        fig.clf()
        for k, (img, lab) in enumerate(zip(images, labels)):
            ax = fig.add_subplot(rows, columns, k + 1)
            ax.imshow(np.moveaxis(np.asarray(img), 0, -1).astype(np.uint8))
            ax.set_title(str(lab), fontsize=8)
            ax.set_axis_off()
