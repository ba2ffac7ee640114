"""Confusion-count metrics for binary masks.

A ratio whose denominator is zero is reported as 1 when the prediction and
the reference are both empty for that class, and 0 otherwise. Dataset-level
reports are the unweighted mean of per-image reports.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

METRIC_NAMES = ("dice", "precision", "recall", "miou", "accuracy")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    precision: float
    recall: float
    miou: float
    accuracy: float
    n_images: int = 1

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            [f"{getattr(self, m):.4f}" for m in METRIC_NAMES] + [self.n_images]
        )
        return buf.getvalue()

    @staticmethod
    def csv_header() -> str:
        return ",".join([f.name for f in fields(MetricsReport)])


def _to_numpy(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def confusion(pred_probs, y, threshold: float = 0.5) -> ConfusionCounts:
    """Pixel counts for ``pred_probs >= threshold`` against binary ``y``."""
    p = _to_numpy(pred_probs)
    t = _to_numpy(y)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and mask {t.shape} differ in shape")
    pred = p >= threshold
    true = t > 0.5
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if counts.total <= 0:
        raise ValueError("cannot compute metrics over zero pixels")
    fg_empty = tp + fp + fn == 0  # neither prediction nor truth has foreground
    bg_empty = tn + fp + fn == 0  # neither has background
    dice = _ratio(2 * tp, 2 * tp + fp + fn, fg_empty)
    precision = _ratio(tp, tp + fp, fg_empty)
    recall = _ratio(tp, tp + fn, fg_empty)
    iou_fg = _ratio(tp, tp + fp + fn, fg_empty)
    iou_bg = _ratio(tn, tn + fp + fn, bg_empty)
    accuracy = (tp + tn) / counts.total
    return MetricsReport(dice, precision, recall, 0.5 * (iou_fg + iou_bg), accuracy, 1)


def image_metrics(pred_probs, y, threshold: float = 0.5) -> MetricsReport:
    return compute_metrics(confusion(pred_probs, y, threshold))


def mean_report(reports: Iterable[MetricsReport]) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    n = len(reports)
    # fsum keeps the mean independent of report order
    means = {m: math.fsum(getattr(r, m) for r in reports) / n for m in METRIC_NAMES}
    return MetricsReport(**means, n_images=sum(r.n_images for r in reports))


def batch_metrics(pred_probs, y, threshold: float = 0.5) -> list[MetricsReport]:
    """Per-image reports for (B, ...) stacks."""
    p, t = _to_numpy(pred_probs), _to_numpy(y)
    return [image_metrics(p[i], t[i], threshold) for i in range(p.shape[0])]
