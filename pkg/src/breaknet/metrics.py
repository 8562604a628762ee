"""Segmentation metrics: Dice, IoU, contour error, thickness error, failures."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .model import CLASS_NAMES

NUM_CLASSES = 9
NUM_BOUNDARIES = NUM_CLASSES - 1
LAYER_NAMES = CLASS_NAMES[1:-1]
BOUNDARY_NAMES = ("ILM", "NFL/IPL", "IPL/INL", "INL/OPL", "OPL/ONL", "ONL/EZ", "EZ/RPE", "BM")
FAILURE_THRESHOLD = 0.01

# Reference values reported for BreakNet on rat vis-OCT (mean, std); kept for
# context only, the synthetic benchmark does not reproduce them.
REFERENCE_BREAKNET_RAT = {"Dice": (0.90, 0.04), "IoU": (0.83, 0.05), "FailureRate": 0.01,
                          "CE_um": (2.13, 0.87), "TE_um": (1.61, 0.73)}


class NotComputableError(ValueError):
    pass


@dataclass
class BoundaryProfile:
    rows: np.ndarray            # (8, W) float, NaN where absent
    defective: np.ndarray       # (W,) bool
    axial_pitch: float = 1.0


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def per_class_scores(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int = NUM_CLASSES):
    d = np.array([dice(pred_labels == c, gt_labels == c) for c in range(num_classes)])
    j = np.array([iou(pred_labels == c, gt_labels == c) for c in range(num_classes)])
    return d, j


def label_to_boundaries(labels: np.ndarray, num_classes: int = NUM_CLASSES,
                        axial_pitch: float = 1.0) -> BoundaryProfile:
    """Recover per-column boundary rows from a label map.

    Boundary ``b`` sits at the first row of class ``b`` directly below a row
    of class ``b - 1``.  A column is defective when its run sequence is not
    strictly increasing or when any class is missing from it.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    nb = num_classes - 1
    rows = np.full((nb, w), np.nan)
    defective = np.zeros(w, dtype=bool)
    up, down = labels[:-1], labels[1:]
    step = down != up
    for col in range(w):
        idx = np.flatnonzero(step[:, col])
        seq = np.concatenate(([labels[0, col]], down[idx, col]))
        if np.any(np.diff(seq) <= 0) or seq.size != num_classes:
            defective[col] = True
        for r in idx:
            a, b = up[r, col], down[r, col]
            if b == a + 1 and np.isnan(rows[b - 1, col]):
                rows[b - 1, col] = r + 1
    return BoundaryProfile(rows, defective, axial_pitch)


def defective_fraction(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> float:
    return float(label_to_boundaries(labels, num_classes).defective.mean())


def detect_failure(labels: np.ndarray, num_classes: int = NUM_CLASSES,
                   threshold: float = FAILURE_THRESHOLD) -> bool:
    """True when more than ``threshold`` of the columns are defective."""
    return defective_fraction(labels, num_classes) > threshold


def _comparable(pred: BoundaryProfile, gt: BoundaryProfile) -> np.ndarray:
    if pred.rows.shape != gt.rows.shape:
        raise ValueError("profiles cover different boundary/column counts")
    if not np.isclose(pred.axial_pitch, gt.axial_pitch):
        raise ValueError("profiles use different axial pitches")
    return ~(pred.defective | gt.defective)


def contour_error_per_boundary(pred: BoundaryProfile, gt: BoundaryProfile) -> np.ndarray:
    cols = _comparable(pred, gt)
    diff = np.abs(pred.rows[:, cols] - gt.rows[:, cols]) * gt.axial_pitch
    with np.errstate(invalid="ignore"):
        return np.array([np.nanmean(d) if np.isfinite(d).any() else np.nan for d in diff])


def contour_error(pred: BoundaryProfile, gt: BoundaryProfile) -> float:
    """Mean |row_pred - row_gt| in micrometres over comparable columns."""
    cols = _comparable(pred, gt)
    diff = np.abs(pred.rows[:, cols] - gt.rows[:, cols])
    diff = diff[np.isfinite(diff)]
    if diff.size == 0:
        raise NotComputableError("contour error not computable: no comparable columns")
    return float(diff.mean() * gt.axial_pitch)


def _thickness(p: BoundaryProfile) -> np.ndarray:
    return np.diff(p.rows, axis=0)


def thickness_error_per_layer(pred: BoundaryProfile, gt: BoundaryProfile) -> np.ndarray:
    cols = _comparable(pred, gt)
    diff = np.abs(_thickness(pred)[:, cols] - _thickness(gt)[:, cols]) * gt.axial_pitch
    return np.array([np.nanmean(d) if np.isfinite(d).any() else np.nan for d in diff])


def thickness_error(pred: BoundaryProfile, gt: BoundaryProfile) -> float:
    """Mean per-layer |thickness_pred - thickness_gt| in micrometres."""
    cols = _comparable(pred, gt)
    diff = np.abs(_thickness(pred)[:, cols] - _thickness(gt)[:, cols])
    diff = diff[np.isfinite(diff)]
    if diff.size == 0:
        raise NotComputableError("thickness error not computable: no comparable columns")
    return float(diff.mean() * gt.axial_pitch)


def intersect_labels(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixelwise agreement of two annotations: (labels, agreement mask)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("annotations differ in shape")
    agree = a == b
    return np.where(agree, a, -1), agree


# ---------------------------------------------------------------------------
# whole-dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class ScanMetrics:
    dice: np.ndarray            # per class
    iou: np.ndarray
    failed: bool
    ce_boundary: Optional[np.ndarray]  # per boundary, um; None if failed
    te_layer: Optional[np.ndarray]     # per layer, um
    ce: Optional[float]
    te: Optional[float]

    @property
    def mean_fg_dice(self) -> float:
        return float(self.dice[1:-1].mean())

    @property
    def mean_fg_iou(self) -> float:
        return float(self.iou[1:-1].mean())


def score_scan(pred_labels: np.ndarray, gt_labels: np.ndarray, axial_pitch: float,
               num_classes: int = NUM_CLASSES) -> ScanMetrics:
    d, j = per_class_scores(pred_labels, gt_labels, num_classes)
    pp = label_to_boundaries(pred_labels, num_classes, axial_pitch)
    gp = label_to_boundaries(gt_labels, num_classes, axial_pitch)
    failed = bool(pp.defective.mean() > FAILURE_THRESHOLD)
    ce_b = te_l = ce = te = None
    if not failed:
        try:
            ce, te = contour_error(pp, gp), thickness_error(pp, gp)
            ce_b, te_l = contour_error_per_boundary(pp, gp), thickness_error_per_layer(pp, gp)
        except NotComputableError:
            failed = True
    return ScanMetrics(d, j, failed, ce_b, te_l, ce, te)


def _ms(values) -> list:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return [None, None]
    return [float(v.mean()), float(v.std())]


@dataclass
class MetricsReport:
    method: str
    scans: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.scans)

    @property
    def failure_rate(self) -> float:
        return float(np.mean([s.failed for s in self.scans])) if self.scans else 0.0

    def dice(self) -> list:
        return _ms(s.mean_fg_dice for s in self.scans)

    def iou(self) -> list:
        return _ms(s.mean_fg_iou for s in self.scans)

    def ce(self) -> list:
        return _ms(s.ce for s in self.scans if not s.failed)

    def te(self) -> list:
        return _ms(s.te for s in self.scans if not s.failed)

    def per_layer_dice(self) -> dict:
        d = np.stack([s.dice for s in self.scans])
        out = {name: _ms(d[:, i + 1]) for i, name in enumerate(LAYER_NAMES)}
        out["All"] = self.dice()
        return out

    def to_dict(self) -> dict:
        ok = [s for s in self.scans if not s.failed]
        dice_c = np.stack([s.dice for s in self.scans])
        iou_c = np.stack([s.iou for s in self.scans])
        ce_b = np.stack([s.ce_boundary for s in ok]) if ok else None
        te_l = np.stack([s.te_layer for s in ok]) if ok else None
        return {
            "method": self.method,
            "num_scans": self.n,
            "num_failed": int(sum(s.failed for s in self.scans)),
            "failure_rate": self.failure_rate,
            "dice": self.dice(),
            "iou": self.iou(),
            "ce_um": self.ce(),
            "te_um": self.te(),
            "per_class": {
                name: {"dice": _ms(dice_c[:, c]), "iou": _ms(iou_c[:, c])}
                for c, name in enumerate(CLASS_NAMES[:dice_c.shape[1]])
            },
            "per_boundary_ce_um": {
                name: (_ms(ce_b[:, b]) if ce_b is not None else [None, None])
                for b, name in enumerate(BOUNDARY_NAMES)
            },
            "per_layer_te_um": {
                name: (_ms(te_l[:, j]) if te_l is not None else [None, None])
                for j, name in enumerate(LAYER_NAMES)
            },
            "per_layer_dice": self.per_layer_dice(),
            "failed_scans": [i for i, s in enumerate(self.scans) if s.failed],
            "per_scan_dice": [s.mean_fg_dice for s in self.scans],
        }


TABLE1_COLUMNS = ("Method", "Dice", "IoU", "FailureRate", "CE_um", "TE_um")
TABLE3_COLUMNS = ("Method",) + LAYER_NAMES + ("All",)


def fmt_ms(ms) -> str:
    m, s = ms
    if m is None:
        return "NA"
    return f"{m:.4f}({s:.4f})"


def table1_row(report: MetricsReport) -> dict:
    return {
        "Method": report.method,
        "Dice": fmt_ms(report.dice()),
        "IoU": fmt_ms(report.iou()),
        "FailureRate": f"{100 * report.failure_rate:.2f}%",
        "CE_um": fmt_ms(report.ce()),
        "TE_um": fmt_ms(report.te()),
    }


def table3_row(report: MetricsReport) -> dict:
    row = {"Method": report.method}
    row.update({k: fmt_ms(v) for k, v in report.per_layer_dice().items()})
    return row


def write_report(report: MetricsReport, out_dir) -> dict:
    """Write report.json, report.csv (Table 1 layout) and report_layers.csv (Table 3 layout)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "layers_csv": out / "report_layers.csv"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    with open(paths["csv"], "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=TABLE1_COLUMNS)
        wr.writeheader()
        wr.writerow(table1_row(report))
    with open(paths["layers_csv"], "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=TABLE3_COLUMNS)
        wr.writeheader()
        wr.writerow(table3_row(report))
    return paths


def evaluate(predict: Callable[[np.ndarray], np.ndarray], samples: Sequence, method: str = "BreakNet",
             batch_size: int = 8, num_classes: int = NUM_CLASSES) -> MetricsReport:
    """Score a predictor over samples.

    ``predict`` maps an N x 1 x H x W image batch to N x C x H x W class
    probabilities; samples need ``image``, ``labels`` and ``axial_pitch``.
    CE/TE statistics skip failed scans.
    """
    if len(samples) == 0:
        raise ValueError("evaluate: empty dataset")
    report = MetricsReport(method)
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = np.stack([s.image for s in batch])[:, None]
        probs = predict(images)
        if probs.shape[1] != num_classes:
            raise ValueError(f"predictor emits {probs.shape[1]} classes, data has {num_classes}")
        pred = probs.argmax(axis=1)
        for s, p in zip(batch, pred):
            report.scans.append(score_scan(p, s.labels, s.axial_pitch, num_classes))
    return report


def failure_rate(label_maps: Iterable[np.ndarray], num_classes: int = NUM_CLASSES) -> float:
    flags = [detect_failure(l, num_classes) for l in label_maps]
    return float(np.mean(flags)) if flags else 0.0
