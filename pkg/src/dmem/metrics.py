"""Binary segmentation scoring: ZSI (the Dice overlap), precision, recall,
F-score, with per-image rows and mean +/- population-std aggregates.

Degenerate masks follow one rule: when a metric's denominator is empty, the
score is 1.0 if the other mask is empty too (perfect agreement) and 0.0
otherwise. Under this rule ZSI and F-score coincide on every image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    pass


def _as_bool(name, mask):
    a = np.asarray(mask)
    return a.astype(bool)


def _tally(pred, gt):
    p = _as_bool("pred", pred)
    g = _as_bool("gt", gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mask shapes differ: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def zsi(pred, gt):
    """2*|pred & gt| / (|pred| + |gt|); 1.0 when both masks are empty."""
    tp, fp, fn = _tally(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def precision(pred, gt):
    tp, fp, fn = _tally(pred, gt)
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0
    return tp / (tp + fp)


def recall(pred, gt):
    tp, fp, fn = _tally(pred, gt)
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def fscore(pred, gt):
    p = precision(pred, gt)
    r = recall(pred, gt)
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def score_pair(image_id, pred, gt):
    return MetricsRow(image_id, zsi(pred, gt), precision(pred, gt), recall(pred, gt),
                      fscore(pred, gt))


@dataclass
class MetricsRow:
    id: str
    zsi: float
    precision: float
    recall: float
    fscore: float


METRIC_NAMES = ("zsi", "precision", "recall", "fscore")
METRIC_LABELS = {"zsi": "ZSI", "precision": "Precision", "recall": "Recall", "fscore": "F-score"}


@dataclass
class MetricsReport:
    rows: list
    mean: dict
    std: dict

    def formatted(self, metric):
        return format_mean_std(self.mean[metric], self.std[metric])


def format_mean_std(m, s):
    return f"{m:.3f}±{s:.3f}"


def aggregate(rows):
    """Mean and population standard deviation (divide by n) per metric."""
    if not rows:
        raise ValueError("aggregate needs at least one row")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(np.sqrt(((vals - vals.mean()) ** 2).mean()))
    return MetricsReport(list(rows), mean, std)


def report_tsv(report):
    lines = ["id\tzsi\tprecision\trecall\tfscore"]
    for r in report.rows:
        lines.append(f"{r.id}\t{r.zsi:.6f}\t{r.precision:.6f}\t{r.recall:.6f}\t{r.fscore:.6f}")
    lines.append("mean\t" + "\t".join(f"{report.mean[n]:.6f}" for n in METRIC_NAMES))
    lines.append("std\t" + "\t".join(f"{report.std[n]:.6f}" for n in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def summary_table(columns):
    """Render metric rows against method columns.

    columns: ordered {method name: MetricsReport}. One line per metric (ZSI,
    Precision, Recall, F-score), one column per method, mean +/- std cells.
    """
    if not columns:
        raise ValueError("summary_table needs at least one column")
    names = list(columns)
    width = max(12, *(len(n) + 2 for n in names))
    header = f"{'Metric':<10}" + "".join(f"{n:>{width}}" for n in names)
    lines = [header, "-" * len(header)]
    for metric in METRIC_NAMES:
        cells = "".join(f"{columns[n].formatted(metric):>{width}}" for n in names)
        lines.append(f"{METRIC_LABELS[metric]:<10}" + cells)
    return "\n".join(lines) + "\n"
