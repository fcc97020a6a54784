"""Confusion-matrix based change-detection metrics.

Change is the positive class.  Every metric is computed from a
:class:`ConfusionMatrix`, which can be accumulated over any number of
images by plain addition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, ShapeError

HEADLINE_METRICS = ("f1", "oa", "ciou", "miou", "fp", "fn")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """The same counts seen with background as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def confusion(pred, gt) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionMatrix(tp, fp, fn, p.size - tp - fp - fn)


def accumulate(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    total = ConfusionMatrix()
    for cm in matrices:
        total = total + cm
    return total


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def _positive_iou(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp + cm.fn
    return 1.0 if denom == 0 else cm.tp / denom


def class_iou(cm: ConfusionMatrix, cls: str = "change") -> float:
    """IoU of one class; a class absent from both prediction and truth scores 1."""
    if cls == "change":
        return _positive_iou(cm)
    if cls == "background":
        return _positive_iou(cm.swapped())
    raise ValueError(f"unknown class {cls!r}")


def mean_iou(cm: ConfusionMatrix) -> float:
    return (class_iou(cm, "change") + class_iou(cm, "background")) / 2


def _positive_f1(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp + cm.fn == 0:
        return 1.0
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1(cm: ConfusionMatrix, mode: str = "change") -> float:
    if mode == "change":
        return _positive_f1(cm)
    if mode == "macro":
        return (_positive_f1(cm) + _positive_f1(cm.swapped())) / 2
    raise ValueError(f"unknown F1 mode {mode!r}")


def error_rates(cm: ConfusionMatrix) -> tuple[float, float]:
    """False-discovery rate and miss rate of the change class."""
    fp_rate = cm.fp / (cm.fp + cm.tp) if cm.fp + cm.tp else 0.0
    fn_rate = cm.fn / (cm.fn + cm.tp) if cm.fn + cm.tp else 0.0
    return fp_rate, fn_rate


@dataclass
class MetricReport:
    oa: float
    f1_change: float
    f1_macro: float
    ciou: float
    miou: float
    fp_rate: float
    fn_rate: float
    tp: int
    fp: int
    fn: int
    tn: int
    aggregation: str = "global"

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricReport":
        fp_rate, fn_rate = error_rates(cm)
        return cls(
            oa=overall_accuracy(cm), f1_change=f1(cm, "change"), f1_macro=f1(cm, "macro"),
            ciou=class_iou(cm, "change"), miou=mean_iou(cm), fp_rate=fp_rate, fn_rate=fn_rate,
            tp=cm.tp, fp=cm.fp, fn=cm.fn, tn=cm.tn, aggregation="global",
        )

    @classmethod
    def from_samples(cls, matrices, aggregation: str = "global") -> "MetricReport":
        """Aggregate per-image matrices.

        ``global`` pools all pixels into one matrix; ``mean`` averages each
        ratio over images (raw counts are still pooled).
        """
        matrices = list(matrices)
        if not matrices:
            raise ConfigError("no samples to evaluate")
        pooled = cls.from_confusion(accumulate(matrices))
        if aggregation == "global":
            return pooled
        if aggregation != "mean":
            raise ValueError(f"unknown aggregation {aggregation!r}")
        per = [asdict(cls.from_confusion(cm)) for cm in matrices]
        ratios = {k: float(np.mean([p[k] for p in per]))
                  for k in ("oa", "f1_change", "f1_macro", "ciou", "miou", "fp_rate", "fn_rate")}
        return cls(**ratios, tp=pooled.tp, fp=pooled.fp, fn=pooled.fn, tn=pooled.tn,
                   aggregation="mean")

    def headline_metrics(self) -> dict:
        """The six headline columns; F1 uses the class-averaged form."""
        return {"f1": self.f1_macro, "oa": self.oa, "ciou": self.ciou, "miou": self.miou,
                "fp": self.fp_rate, "fn": self.fn_rate}

    def to_dict(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "metrics": self.headline_metrics(),
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
            "supplementary": {"f1_change": self.f1_change},
        }


def write_report(report: MetricReport, rows, out_dir) -> dict:
    """Write ``report.json``, ``report.csv`` and ``per_sample.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(HEADLINE_METRICS) + ["f1_change", "tp", "fp", "fn", "tn", "aggregation"])
        m = payload["metrics"]
        writer.writerow([repr(m[k]) for k in HEADLINE_METRICS] + [repr(report.f1_change), report.tp,
                        report.fp, report.fn, report.tn, report.aggregation])
    with open(out_dir / "per_sample.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "tp", "fp", "fn", "tn", "ciou"])
        for sid, cm in rows:
            writer.writerow([sid, cm.tp, cm.fp, cm.fn, cm.tn, repr(class_iou(cm))])
    return payload


def evaluate(net, samples, batch_size: int = 16, aggregation: str = "global"):
    """Predict a change mask for every sample and score against its pixel mask.

    Returns ``(report, rows)`` where ``rows`` holds ``(id, ConfusionMatrix)``
    per sample.
    """
    from .segnet import predict_change_masks

    samples = list(samples)
    if not samples:
        raise ConfigError("cannot evaluate on an empty sample list")
    preds = predict_change_masks(net, samples, batch_size=batch_size)
    rows = [(s.id, confusion(p, s.mask)) for s, p in zip(samples, preds)]
    return MetricReport.from_samples([cm for _, cm in rows], aggregation), rows
