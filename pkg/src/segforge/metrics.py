"""Pixel-level confusion accounting and segmentation metrics.

Classes absent from both prediction and ground truth over the whole
evaluation set (zero union) are left out of per-class results and every
mean. MCC with a zero denominator is reported as 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import CLASS_NAMES, DEFAULT_CIW, as_mask


@dataclass
class ConfusionTotals:
    """Per-class TP/FP/FN/TN pixel counts for labels ``0..num_classes``."""

    num_classes: int
    tp: np.ndarray = None  # type: ignore[assignment]
    fp: np.ndarray = None  # type: ignore[assignment]
    fn: np.ndarray = None  # type: ignore[assignment]
    tn: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        k = self.num_classes + 1
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(k, dtype=np.int64))

    @property
    def labels(self) -> range:
        return range(self.num_classes + 1)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def union(self, c: int) -> int:
        return int(self.tp[c] + self.fp[c] + self.fn[c])

    def evaluable(self) -> list[int]:
        return [c for c in self.labels if self.union(c) > 0]

    def __add__(self, other: "ConfusionTotals") -> "ConfusionTotals":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        return ConfusionTotals(
            self.num_classes,
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn,
        )


def accumulate_confusion(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    totals: ConfusionTotals | None = None,
) -> ConfusionTotals:
    """Add one prediction/ground-truth pair to ``totals`` (created if None)."""
    pred = as_mask(pred, num_classes)
    gt = as_mask(gt, num_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")
    if totals is None:
        totals = ConfusionTotals(num_classes)
    k = num_classes + 1
    cm = np.bincount(
        gt.ravel().astype(np.int64) * k + pred.ravel(), minlength=k * k
    ).reshape(k, k)  # rows: gt, cols: pred
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = gt.size - tp - fp - fn
    totals.tp += tp
    totals.fp += fp
    totals.fn += fn
    totals.tn += tn
    return totals


def precision_per_class(totals: ConfusionTotals) -> dict[int, float]:
    return {
        c: (totals.tp[c] / (totals.tp[c] + totals.fp[c])) if totals.tp[c] + totals.fp[c] else 0.0
        for c in totals.evaluable()
    }


def recall_per_class(totals: ConfusionTotals) -> dict[int, float]:
    return {
        c: (totals.tp[c] / (totals.tp[c] + totals.fn[c])) if totals.tp[c] + totals.fn[c] else 0.0
        for c in totals.evaluable()
    }


def f1_per_class(totals: ConfusionTotals) -> dict[int, float]:
    """Harmonic mean of precision and recall; 0 when TP is 0."""
    out = {}
    for c in totals.evaluable():
        tp, fp, fn = int(totals.tp[c]), int(totals.fp[c]), int(totals.fn[c])
        out[c] = 2 * tp / (2 * tp + fp + fn)
    return out


def iou_per_class(totals: ConfusionTotals) -> dict[int, float]:
    return {c: int(totals.tp[c]) / totals.union(c) for c in totals.evaluable()}


def fwiou(totals: ConfusionTotals, ciw: Mapping[int, float] | None = None) -> float:
    """Weighted intersection over weighted union, summed over the whole set.

    Only classes listed in ``ciw`` take part (default: the defect-class
    importance weights, so background is left out).
    """
    ciw = DEFAULT_CIW if ciw is None else ciw
    num = den = 0.0
    for c, w in sorted(ciw.items()):
        if not 0 <= c <= totals.num_classes:
            continue
        num += w * int(totals.tp[c])
        den += w * totals.union(c)
    if den == 0:
        raise ValueError("FWIoU undefined: all weighted unions are zero")
    return num / den


def balanced_accuracy(totals: ConfusionTotals, include_background: bool = True) -> tuple[float, int]:
    """Mean recall over classes present in the ground truth.

    Returns ``(value, divisor)``; the divisor is the number of classes
    averaged.
    """
    classes = [
        c for c in totals.labels
        if totals.tp[c] + totals.fn[c] > 0 and (include_background or c != 0)
    ]
    if not classes:
        raise ValueError("balanced accuracy undefined: no class present in ground truth")
    recalls = [int(totals.tp[c]) / int(totals.tp[c] + totals.fn[c]) for c in classes]
    return sum(recalls) / len(recalls), len(classes)


def mcc_value(tp: int, fp: int, fn: int, tn: int) -> float:
    denom = float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn)
    if denom == 0:
        return 0.0
    return (float(tn) * tp - float(fn) * fp) / math.sqrt(denom)


def mcc(totals: ConfusionTotals) -> tuple[dict[int, float], float]:
    """Per-class Matthews correlation and its mean over evaluable classes."""
    per = {
        c: mcc_value(int(totals.tp[c]), int(totals.fp[c]), int(totals.fn[c]), int(totals.tn[c]))
        for c in totals.evaluable()
    }
    mean = sum(per.values()) / len(per) if per else 0.0
    return per, mean


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


@dataclass
class MetricsReport:
    num_classes: int
    f1: dict[int, float]
    iou: dict[int, float]
    precision: dict[int, float]
    recall: dict[int, float]
    mcc: dict[int, float]
    avg_f1_bg: float
    avg_f1_no_bg: float
    avg_iou_bg: float
    avg_iou_no_bg: float
    fwiou: float
    balanced_accuracy: float
    ba_divisor: int
    mean_mcc: float
    excluded: list[int] = field(default_factory=list)
    extra: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        out = {
            "avg_f1_bg": self.avg_f1_bg,
            "avg_f1_no_bg": self.avg_f1_no_bg,
            "avg_iou_bg": self.avg_iou_bg,
            "avg_iou_no_bg": self.avg_iou_no_bg,
            "fwiou": self.fwiou,
            "balanced_accuracy": self.balanced_accuracy,
            "mean_mcc": self.mean_mcc,
        }
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        lines = []
        for c in sorted(self.f1):
            name = CLASS_NAMES.get(c, str(c))
            lines.append(f"class_{c}.name={name}")
            lines.append(f"class_{c}.f1={self.f1[c]:.6f}")
            lines.append(f"class_{c}.iou={self.iou[c]:.6f}")
            lines.append(f"class_{c}.mcc={self.mcc[c]:.6f}")
        for key, value in self.summary().items():
            lines.append(f"{key}={value:.6f}")
        lines.append(f"ba_divisor={self.ba_divisor}")
        lines.append("excluded_classes=" + ",".join(str(c) for c in self.excluded))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "name", "precision", "recall", "f1", "iou", "mcc"])
        for c in sorted(self.f1):
            writer.writerow([
                c, CLASS_NAMES.get(c, str(c)),
                f"{self.precision[c]:.6f}", f"{self.recall[c]:.6f}",
                f"{self.f1[c]:.6f}", f"{self.iou[c]:.6f}", f"{self.mcc[c]:.6f}",
            ])
        for key, value in self.summary().items():
            writer.writerow([key, "", "", "", "", "", f"{value:.6f}"])
        return buf.getvalue()


def report_from_totals(totals: ConfusionTotals, ciw: Mapping[int, float] | None = None) -> MetricsReport:
    f1 = f1_per_class(totals)
    iou = iou_per_class(totals)
    per_mcc, mean_mcc = mcc(totals)
    ba, divisor = balanced_accuracy(totals)
    try:
        fw = fwiou(totals, ciw)
    except ValueError:
        fw = float("nan")
    excluded = [c for c in totals.labels if totals.union(c) == 0]
    return MetricsReport(
        num_classes=totals.num_classes,
        f1=f1,
        iou=iou,
        precision=precision_per_class(totals),
        recall=recall_per_class(totals),
        mcc=per_mcc,
        avg_f1_bg=_mean(list(f1.values())),
        avg_f1_no_bg=_mean([v for c, v in f1.items() if c != 0]),
        avg_iou_bg=_mean(list(iou.values())),
        avg_iou_no_bg=_mean([v for c, v in iou.items() if c != 0]),
        fwiou=fw,
        balanced_accuracy=ba,
        ba_divisor=divisor,
        mean_mcc=mean_mcc,
        excluded=excluded,
    )


def evaluate_dataset(
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    num_classes: int,
    ciw: Mapping[int, float] | None = None,
) -> MetricsReport:
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"{len(pred_masks)} predictions for {len(gt_masks)} ground-truth masks")
    totals = ConfusionTotals(num_classes)
    for pred, gt in zip(pred_masks, gt_masks):
        accumulate_confusion(pred, gt, num_classes, totals)
    return report_from_totals(totals, ciw)
