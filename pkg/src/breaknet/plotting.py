"""Static report figures (PNG) written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LAYER_COLORS = ["#1565C0", "#1E88E5", "#42A5F5", "#64B5F6", "#90CAF9", "#2E7D32", "#E65100"]
GT_COLOR = "#2E7D32"
PRED_COLOR = "#C62828"


def setup_style():
    plt.rcParams.update({
        "font.family": "sans-serif",
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.labelsize": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "figure.facecolor": "white",
        "savefig.facecolor": "white",
        "savefig.bbox": "tight",
        "savefig.dpi": 120,
        "svg.hashsalt": "breaknet",
    })


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(epochs: list, path):
    setup_style()
    ep = [e["epoch"] for e in epochs]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(ep, [e["train_loss"] for e in epochs], color=LAYER_COLORS[0])
    a1.set_xlabel("epoch")
    a1.set_ylabel("train loss")
    a2.plot(ep, [e["val_dice"] for e in epochs], label="Dice", color=LAYER_COLORS[0])
    a2.plot(ep, [e["val_iou"] for e in epochs], label="IoU", color=LAYER_COLORS[5])
    a2.set_xlabel("epoch")
    a2.set_ylabel("validation")
    a2.legend(frameon=False)
    return _save(fig, path)


def plot_layer_scores(report_dict: dict, path):
    """Per-layer Dice bars plus per-boundary contour error."""
    setup_style()
    layers = [k for k in report_dict["per_layer_dice"] if k != "All"]
    means = [report_dict["per_layer_dice"][k][0] for k in layers]
    stds = [report_dict["per_layer_dice"][k][1] for k in layers]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3))
    a1.bar(layers, means, yerr=stds, color=LAYER_COLORS, capsize=2)
    a1.set_ylim(0, 1)
    a1.set_ylabel("Dice")
    a1.set_title(f"{report_dict['method']}: failure rate {100 * report_dict['failure_rate']:.1f}%")
    ce = report_dict["per_boundary_ce_um"]
    names = list(ce)
    vals = [ce[k][0] if ce[k][0] is not None else np.nan for k in names]
    a2.bar(names, vals, color=LAYER_COLORS[1])
    a2.set_ylabel("contour error (um)")
    a2.tick_params(axis="x", rotation=45)
    return _save(fig, path)


def plot_overlay(image, gt_rows, pred_rows, path, title: str = ""):
    setup_style()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    x = np.arange(image.shape[1])
    for b in gt_rows:
        ax.plot(x, b, color=GT_COLOR, lw=0.8)
    for b in pred_rows:
        ax.plot(x, b, color=PRED_COLOR, lw=0.8, ls="--")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_ablation(rows: list, path):
    setup_style()
    names = [r["Method"] for r in rows]
    dice = [r["dice_mean"] for r in rows]
    err = [r["dice_std"] for r in rows]
    wall = [r["wall_time_s"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.bar(names, dice, yerr=err, color=LAYER_COLORS[:len(names)], capsize=2)
    a1.set_ylabel("Dice")
    lo = min(dice) - 0.1 if dice else 0
    a1.set_ylim(max(0.0, lo), 1.0)
    a2.bar(names, wall, color=LAYER_COLORS[5])
    a2.set_ylabel("training wall time (s)")
    return _save(fig, path)
