"""Evaluation metrics: class-wise Jaccard indices, confusion matrices, the
classification report, gray-value class histograms, and the two theoretical
baselines (majority-class and per-gray-value majority).

Conventions used throughout: argmax ties resolve to the lowest class id,
and the Jaccard index of two empty sets is 1 (a class absent from both
volumes is a perfect match).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

# Phase names of the three-class composite datasets; generic names otherwise.
PHASE_NAMES = ("matrix", "fiber", "porosity")


def class_names(num_classes):
    if num_classes == len(PHASE_NAMES):
        return list(PHASE_NAMES)
    return [f"class{c}" for c in range(num_classes)]


def jaccard_index(a, b):
    """|A ∩ B| / |A ∪ B| of two boolean masks; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _check_labels(pred, gt, num_classes):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    return pred, gt


def classwise_jaccard(pred, gt, num_classes):
    """Per-class Jaccard vector and its arithmetic mean."""
    pred, gt = _check_labels(pred, gt, num_classes)
    cm = confusion(pred, gt, num_classes)
    tp = np.diag(cm.counts).astype(np.float64)
    support = cm.counts.sum(axis=1).astype(np.float64)
    predicted = cm.counts.sum(axis=0).astype(np.float64)
    union = support + predicted - tp
    per_class = np.where(union > 0, tp / np.maximum(union, 1), 1.0)
    return per_class, float(per_class.mean())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[gt][pred]

    @property
    def support(self):
        return self.counts.sum(axis=1)

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(pred, gt, num_classes):
    pred, gt = _check_labels(pred, gt, num_classes)
    flat = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def normalize_confusion(cm, mode):
    """Percentage view of a confusion matrix.

    "global" divides by the total voxel count; "byrow" makes each ground
    truth row sum to 100 (diagonal = recall); "bycolumn" makes each predicted
    column sum to 100 (diagonal = precision).  Empty rows/columns become all
    zeros.
    """
    counts = cm.counts.astype(np.float64)
    mode = mode.lower()
    if mode == "global":
        denom = counts.sum()
        return counts * (100.0 / denom) if denom else counts
    if mode == "byrow":
        denom = counts.sum(axis=1, keepdims=True)
        return np.divide(counts * 100.0, denom, out=np.zeros_like(counts), where=denom > 0)
    if mode == "bycolumn":
        denom = counts.sum(axis=0, keepdims=True)
        return np.divide(counts * 100.0, denom, out=np.zeros_like(counts), where=denom > 0)
    raise ValueError(f"unknown normalization {mode!r}")


@dataclass
class ReportRow:
    name: str
    accuracy: float      # percent
    precision: float
    recall: float
    f1: float
    jaccard: float | None
    support: int | None
    zero_support: bool = False


@dataclass
class ClassificationReport:
    per_class: list
    macro: ReportRow
    micro: ReportRow


def classification_report(pred, gt, num_classes):
    """One-vs-rest accuracy/precision/recall/F1/Jaccard per class with macro
    and micro averages.  Micro pools the counts (all four metrics coincide
    with overall accuracy); Jaccard has no micro value.

    A class with zero support reports precision/recall 0 and is flagged.
    """
    pred, gt = _check_labels(pred, gt, num_classes)
    cm = confusion(pred, gt, num_classes)
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    fp = predicted - tp
    fn = support - tp
    tn = total - tp - fp - fn
    jac, _ = classwise_jaccard(pred, gt, num_classes)

    names = class_names(num_classes)
    rows = []
    for c in range(num_classes):
        zero = support[c] == 0
        prec = tp[c] / predicted[c] if predicted[c] else 0.0
        rec = tp[c] / support[c] if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        acc = (tp[c] + tn[c]) / total
        rows.append(ReportRow(names[c], 100 * acc, 100 * prec, 100 * rec, 100 * f1,
                              100 * jac[c], int(support[c]), bool(zero)))
    macro = ReportRow(
        "macro avg",
        sum(r.accuracy for r in rows) / num_classes,
        sum(r.precision for r in rows) / num_classes,
        sum(r.recall for r in rows) / num_classes,
        sum(r.f1 for r in rows) / num_classes,
        sum(r.jaccard for r in rows) / num_classes,
        None,
    )
    overall = 100 * tp.sum() / total
    micro = ReportRow("micro avg", overall, overall, overall, overall, None, None)
    return ClassificationReport(rows, macro, micro)


REPORT_COLUMNS = ("class", "accuracy", "precision", "recall", "f1", "jaccard", "support")


def report_to_csv(report):
    """RFC-4180 CSV with one header row; percentages to one decimal place."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.per_class + [report.macro, report.micro]:
        w.writerow([
            r.name,
            f"{r.accuracy:.1f}", f"{r.precision:.1f}", f"{r.recall:.1f}", f"{r.f1:.1f}",
            "-" if r.jaccard is None else f"{r.jaccard:.1f}",
            "-" if r.support is None else r.support,
        ])
    return buf.getvalue()


def report_to_text(report):
    header = f"{'class':>12} {'acc%':>7} {'prec%':>7} {'rec%':>7} {'f1%':>7} {'jacc%':>7} {'support':>12}"
    lines = [header, "-" * len(header)]
    for r in report.per_class + [report.macro, report.micro]:
        jac = "-" if r.jaccard is None else f"{r.jaccard:7.1f}"
        sup = "-" if r.support is None else str(r.support)
        lines.append(
            f"{r.name:>12} {r.accuracy:7.1f} {r.precision:7.1f} {r.recall:7.1f} "
            f"{r.f1:7.1f} {jac:>7} {sup:>12}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# gray-value histograms and theoretical baselines


@dataclass
class ClassHistogram:
    """Voxel counts per (gray value, class); rows span the full dtype range."""

    counts: np.ndarray  # (num_values, num_classes)

    @property
    def total(self):
        return int(self.counts.sum())

    def normalized(self):
        """Globally normalized view: each bin is a proportion of all voxels."""
        return self.counts / self.total

    def class_fractions(self):
        return self.counts.sum(axis=0) / self.total


def class_histograms(gray, gt, num_classes):
    gray, gt = np.asarray(gray), np.asarray(gt)
    if gray.shape != gt.shape:
        raise ValueError(f"gray shape {gray.shape} != labels shape {gt.shape}")
    if not np.issubdtype(gray.dtype, np.integer):
        raise ValueError("gray volume must have an integer dtype")
    num_values = int(np.iinfo(gray.dtype).max) + 1
    flat = gray.reshape(-1).astype(np.int64) * num_classes + gt.reshape(-1).astype(np.int64)
    counts = np.bincount(flat, minlength=num_values * num_classes)
    return ClassHistogram(counts.reshape(num_values, num_classes))


def baseline_zerooc(class_fractions):
    """Expected class-wise Jaccard of always predicting the majority class.

    The majority class scores its own fraction; every other class scores 0,
    so the mean is fraction(majority) / C.
    """
    f = np.asarray(class_fractions, dtype=np.float64)
    if f.size == 0:
        raise ValueError("class fractions must be non-empty")
    if abs(f.sum() - 1.0) > 1e-6:
        raise ValueError("class fractions must sum to 1")
    per_class = np.zeros_like(f)
    major = int(np.argmax(f))  # ties resolve to the lowest class id
    per_class[major] = f[major]
    return per_class, float(per_class.mean())


def baseline_bin_zerooc(hist):
    """Expected class-wise Jaccard of predicting, for each gray value, that
    value's majority class (a majority vote per histogram bin)."""
    counts = hist.counts.astype(np.float64)
    if counts.sum() == 0:
        raise ValueError("histogram is empty")
    pred = np.argmax(counts, axis=1)  # ties resolve to the lowest class id
    num_classes = counts.shape[1]
    per_class = np.zeros(num_classes)
    support = counts.sum(axis=0)
    for c in range(num_classes):
        rows = pred == c
        tp = counts[rows, c].sum()
        fp = counts[rows].sum() - tp
        fn = support[c] - tp
        denom = tp + fp + fn
        per_class[c] = tp / denom if denom > 0 else 1.0
    return per_class, float(per_class.mean())


def error_volume(pred, gt):
    """Binary disagreement volume: 1 means incorrect, 0 means correct."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return (pred != gt).astype(np.uint8)
