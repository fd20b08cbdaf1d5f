"""Matplotlib renderings written next to the delimited/JSON report outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams["figure.figsize"] = (6.4, 4.0)
plt.rcParams["font.size"] = 9
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3


def save_training_curves(log, path):
    """Loss curve with validation OA on a twin axis, one point per epoch."""
    epochs = [rec["epoch"] for rec in log]
    loss = [rec["train_loss"] for rec in log]
    fig, ax = plt.subplots()
    ax.plot(epochs, loss, color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    val = [(rec["epoch"], rec["val_oa"]) for rec in log if rec.get("val_oa") is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), color="tab:orange", label="val OA")
        ax2.set_ylabel("val OA", color="tab:orange")
        ax2.set_ylim(0.0, 1.02)
        ax2.grid(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_cost_breakdown(report, path):
    """Stacked horizontal bars of per-layer multiply-adds (log scale)."""
    rows = [r for r in report.rows if r.total_madds > 0]
    names = [r.name for r in rows]
    conv = np.array([r.conv_madds for r in rows], dtype=float)
    att = np.array([r.attention_madds for r in rows], dtype=float)
    agg = np.array([r.aggregation_madds for r in rows], dtype=float)
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7.0, max(3.0, 0.28 * len(rows) + 1.2)))
    ax.barh(y, conv, label="conv")
    ax.barh(y, att, left=conv, label="attention")
    ax.barh(y, agg, left=conv + att, label="aggregation")
    ax.set_yticks(y, names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.set_xlabel("multiply-adds per sample")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_heatmap(metrics, class_names, path):
    conf = metrics.confusion
    fig, ax = plt.subplots()
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ticks = np.arange(len(class_names))
    ax.set_xticks(ticks, class_names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(ticks, class_names, fontsize=7)
    ax.grid(False)
    if len(class_names) <= 12:
        for i in range(conf.shape[0]):
            for j in range(conf.shape[1]):
                if conf[i, j]:
                    ax.text(j, i, str(conf[i, j]), ha="center", va="center",
                            fontsize=7, color="black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(f"OA {metrics.oa:.4f}  AA {metrics.aa:.4f}  kappa {metrics.kappa:.4f}",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_class_map(class_raster, class_names, path):
    """Color rendering of a class-index raster; background (0) is black."""
    num_classes = len(class_names)
    cmap = plt.get_cmap("tab20", max(num_classes, 1))
    rgb = np.zeros(class_raster.shape + (3,))
    for c in range(1, num_classes + 1):
        rgb[class_raster == c] = cmap((c - 1) % 20)[:3]
    fig, ax = plt.subplots()
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    handles = [plt.Rectangle((0, 0), 1, 1, color=cmap((c - 1) % 20))
               for c in range(1, num_classes + 1)]
    ax.legend(handles, class_names, loc="center left", bbox_to_anchor=(1.0, 0.5),
              fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
