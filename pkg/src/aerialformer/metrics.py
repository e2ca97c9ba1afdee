"""Per-class TP/TN/FP/FN counts and the IoU / Acc / F1 metric family."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import IGNORE_INDEX
from .errors import DataError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    pixels: int

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp,
                               self.fn + other.fn, self.pixels + other.pixels)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
              ignore_index: int = IGNORE_INDEX) -> ConfusionCounts:
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != ignore_index
    p, g = pred[valid], gt[valid]
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise DataError(f"predicted ids must lie in [0, {num_classes})")
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise DataError(f"ground-truth ids must lie in [0, {num_classes}) or be {ignore_index}")
    cm = np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    total = int(valid.sum())
    return ConfusionCounts(tp, total - tp - fp - fn, fp, fn, total)


def _mean(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class MetricsReport:
    tp: list[int]
    tn: list[int]
    fp: list[int]
    fn: list[int]
    iou: list[float | None]
    acc: list[float | None]
    f1: list[float | None]
    miou: float | None
    oa: float | None
    mf1: float | None
    pixel_count: int
    pixel_accuracy: float | None
    undefined_classes: list[int] = field(default_factory=list)
    class_names: list[str] | None = None

    def to_dict(self, include_pixel_accuracy: bool = True) -> dict:
        names = self.class_names or [str(i) for i in range(len(self.tp))]
        d = {
            "mIoU": self.miou, "OA": self.oa, "mF1": self.mf1, "pixel_count": self.pixel_count,
            "undefined_classes": self.undefined_classes,
            "classes": [
                {"id": i, "name": names[i], "TP": self.tp[i], "TN": self.tn[i], "FP": self.fp[i],
                 "FN": self.fn[i], "IoU": self.iou[i], "Acc": self.acc[i], "F1": self.f1[i]}
                for i in range(len(self.tp))],
        }
        if include_pixel_accuracy:
            d["pixel_accuracy"] = self.pixel_accuracy
        return d

    def table(self, include_pixel_accuracy: bool = False) -> str:
        names = self.class_names or [str(i) for i in range(len(self.tp))]
        width = max(5, *(len(n) for n in names))
        fmt = lambda v: "   n/a" if v is None else f"{100 * v:6.2f}"  # noqa: E731
        lines = [f"{'class':<{width}}  {'IoU':>6}  {'Acc':>6}  {'F1':>6}  {'TP':>9}  {'FP':>9}  "
                 f"{'FN':>9}"]
        for i, name in enumerate(names):
            lines.append(f"{name:<{width}}  {fmt(self.iou[i])}  {fmt(self.acc[i])}  "
                         f"{fmt(self.f1[i])}  {self.tp[i]:>9}  {self.fp[i]:>9}  {self.fn[i]:>9}")
        lines.append(f"mIoU {fmt(self.miou)}   OA {fmt(self.oa)}   mF1 {fmt(self.mf1)}")
        if include_pixel_accuracy:
            lines.append(f"pixel accuracy {fmt(self.pixel_accuracy)}")
        if self.undefined_classes:
            lines.append("absent from prediction and ground truth (excluded from means): "
                         + ", ".join(names[i] for i in self.undefined_classes))
        return "\n".join(lines)


def metrics(counts: ConfusionCounts, class_names: list[str] | None = None) -> MetricsReport:
    """IoU = TP/(TP+FN+FP), Acc = (TP+TN)/total, F1 = 2TP/(2TP+FN+FP); unweighted class means.

    OA is the mean of per-class Acc (true negatives included). Classes with
    TP+FN+FP = 0 have undefined IoU/F1 and are left out of mIoU/mF1.
    """
    tp = [int(v) for v in counts.tp]
    tn = [int(v) for v in counts.tn]
    fp = [int(v) for v in counts.fp]
    fn = [int(v) for v in counts.fn]
    iou, acc, f1, undefined = [], [], [], []
    for l in range(len(tp)):
        union = tp[l] + fn[l] + fp[l]
        total = union + tn[l]
        if union == 0:
            undefined.append(l)
            iou.append(None)
            f1.append(None)
        else:
            iou.append(tp[l] / union)
            f1.append(2 * tp[l] / (2 * tp[l] + fn[l] + fp[l]))
        acc.append((tp[l] + tn[l]) / total if total else None)
    pa = sum(tp) / counts.pixels if counts.pixels else None
    return MetricsReport(tp, tn, fp, fn, iou, acc, f1, _mean(iou), _mean(acc), _mean(f1),
                         int(counts.pixels), pa, undefined, class_names)
