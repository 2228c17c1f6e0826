"""Pixel metrics (IoU, F-score), Aggregated Jaccard Index and fold summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

# two-sided 95% Student-t quantiles t(0.975, df), df = 1..30
T975 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def num_classes(self) -> int:
        return len(self.tp)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int = 2) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction extents {pred.shape} != ground truth extents {gt.shape}")
    joint = np.bincount(
        gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel(),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes)
    tp = np.diag(joint).copy()
    return ConfusionCounts(tp=tp, fp=joint.sum(axis=0) - tp, fn=joint.sum(axis=1) - tp)


def iou(counts: ConfusionCounts, cls: int = 1) -> float:
    tp, fp, fn = int(counts.tp[cls]), int(counts.fp[cls]), int(counts.fn[cls])
    if tp + fp + fn == 0:
        return 1.0  # class absent from both: perfect agreement
    return tp / (tp + fp + fn)


def f_score(counts: ConfusionCounts, cls: int = 1) -> float:
    tp, fp, fn = int(counts.tp[cls]), int(counts.fp[cls]), int(counts.fn[cls])
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def mean_iou(counts: ConfusionCounts) -> float:
    return float(np.mean([iou(counts, c) for c in range(counts.num_classes)]))


def _overlap_table(gt: np.ndarray, pred: np.ndarray):
    g = gt.astype(np.int64).ravel()
    p = pred.astype(np.int64).ravel()
    ng, np_ = int(g.max(initial=0)) + 1, int(p.max(initial=0)) + 1
    table = np.bincount(g * np_ + p, minlength=ng * np_).reshape(ng, np_)
    return table


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard Index of two instance maps (0 = background).

    Ground-truth objects are visited by ascending id; each takes the still
    unused prediction with the highest IoU (none if every overlap is zero).
    Predictions never matched add their full area to the union.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"instance map extents differ: {gt.shape} vs {pred.shape}")
    table = _overlap_table(gt, pred)
    gt_area = table.sum(axis=1)
    pred_area = table.sum(axis=0)
    gt_ids = [i for i in range(1, table.shape[0]) if gt_area[i] > 0]
    pred_ids = np.array([j for j in range(1, table.shape[1]) if pred_area[j] > 0], dtype=np.int64)
    if not gt_ids and pred_ids.size == 0:
        return 1.0
    used = np.zeros(table.shape[1], dtype=bool)
    inter_sum = 0
    union_sum = 0
    for i in gt_ids:
        best_j, best_iou = -1, 0.0
        if pred_ids.size:
            inter = table[i, pred_ids]
            union = gt_area[i] + pred_area[pred_ids] - inter
            scores = np.where(used[pred_ids], -1.0, inter / union)
            k = int(np.argmax(scores))
            if scores[k] > 0:
                best_j, best_iou = int(pred_ids[k]), scores[k]
        if best_j < 0:
            union_sum += int(gt_area[i])
            continue
        used[best_j] = True
        inter_ij = int(table[i, best_j])
        inter_sum += inter_ij
        union_sum += int(gt_area[i] + pred_area[best_j] - inter_ij)
    union_sum += int(sum(pred_area[j] for j in pred_ids if not used[j]))
    return inter_sum / union_sum if union_sum else 0.0


def t_quantile_975(df: int) -> float:
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if df <= len(T975):
        return T975[df - 1]
    return float(sps.t.ppf(0.975, df))


def aggregate_folds(values) -> tuple:
    """(mean, 95% confidence half-width) with a Student-t interval."""
    x = np.asarray(list(values), dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"aggregate_folds needs at least 2 values, got {x.size}")
    x = np.sort(x)  # order-independent floating-point sums
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    return mean, t_quantile_975(x.size - 1) * sd / math.sqrt(x.size)


@dataclass
class MetricsReport:
    """Per-fold metric means plus their aggregate; ``rows`` keeps per-image values."""

    folds: list = field(default_factory=list)  # dicts: fold plus one mean per metric
    rows: list = field(default_factory=list)  # dicts: image, fold plus one value per metric
    audit: list = field(default_factory=list)  # dicts: fold, train_ids, val_ids

    METRICS = ("iou", "fscore", "mean_iou", "aji")

    def add_fold(self, fold: int, rows: list) -> dict:
        self.rows.extend(rows)
        summary = {"fold": fold}
        for m in self.METRICS:
            summary[m] = float(np.mean([r[m] for r in rows])) if rows else float("nan")
        self.folds.append(summary)
        return summary

    @property
    def fold_count(self) -> int:
        return len(self.folds)

    def aggregate(self) -> dict:
        return {m: aggregate_folds([f[m] for f in self.folds]) for m in self.METRICS}

    def csv_lines(self) -> list:
        lines = ["image,fold," + ",".join(self.METRICS)]
        for r in self.rows:
            lines.append(f"{r['image']},{r['fold']}," + self._values(r))
        for f in self.folds:
            lines.append(f"fold_mean,{f['fold']}," + self._values(f))
        if len(self.folds) >= 2:
            agg = self.aggregate()
            lines.append("mean,all," + ",".join(f"{agg[m][0]:.6f}" for m in self.METRICS))
            lines.append("ci95,all," + ",".join(f"{agg[m][1]:.6f}" for m in self.METRICS))
        return lines

    def _values(self, entry: dict) -> str:
        return ",".join(f"{entry[m]:.6f}" for m in self.METRICS)

    def write_csv(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, "\n".join(self.csv_lines()) + "\n")
