"""Evaluation metrics: Acc-2 in both zero conventions, Acc-7, F1, MAE, Corr, WA."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .data import bin_labels, class_values


@dataclass
class MetricsReport:
    acc: float = float("nan")
    acc2_nonneg: float = float("nan")
    acc2_pos: float = float("nan")
    acc7: float = float("nan")
    f1_nonneg: float = float("nan")
    f1_pos: float = float("nan")
    f1_weighted: float = float("nan")
    mae: float = float("nan")
    corr: float = float("nan")
    wa: float = float("nan")
    per_class_f1: Dict[int, float] = field(default_factory=dict)
    n: int = 0
    n_pos: int = 0
    corr_undefined: bool = False

    def scalars(self) -> Dict[str, float]:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in ("per_class_f1", "corr_undefined")
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_f1"] = {str(k): v for k, v in self.per_class_f1.items()}
        return d


def f1_per_class(y_true, y_pred, classes) -> Dict[int, float]:
    out = {}
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        out[int(c)] = float(2 * tp / denom) if denom else 0.0
    return out


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted F1 over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        return float("nan")
    classes, support = np.unique(y_true, return_counts=True)
    per = f1_per_class(y_true, y_pred, classes)
    return float(sum(per[int(c)] * s for c, s in zip(classes, support)) / support.sum())


def pearson(x, y):
    """Pearson correlation; returns (0.0, True) when either side has zero variance."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if den == 0.0:
        return 0.0, True
    return float(np.clip((xc * yc).sum() / den, -1.0, 1.0)), False


def regression_metrics(pred_scores, true_scores, report: Optional[MetricsReport] = None) -> MetricsReport:
    r = report or MetricsReport()
    p = np.asarray(pred_scores, dtype=np.float64)
    t = np.asarray(true_scores, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch {p.shape} vs {t.shape}")
    pc = np.clip(p, -3.0, 3.0)
    t_nonneg, t_pos = bin_labels(t, 2)
    p_nonneg, _ = bin_labels(pc, 2)
    # zero exclusion applies to targets; predictions are binned the same way in both conventions
    keep = t_pos >= 0
    p_pos = p_nonneg
    r.n = len(t)
    r.n_pos = int(keep.sum())
    r.acc2_nonneg = float(np.mean(p_nonneg == t_nonneg))
    r.f1_nonneg = weighted_f1(t_nonneg, p_nonneg)
    r.acc2_pos = float(np.mean(p_pos[keep] == t_pos[keep])) if keep.any() else float("nan")
    r.f1_pos = weighted_f1(t_pos[keep], p_pos[keep])
    r.acc7 = float(np.mean(bin_labels(pc, 7) == bin_labels(t, 7)))
    r.mae = float(np.mean(np.abs(p - t)))
    r.corr, r.corr_undefined = pearson(p, t)
    return r


def classification_metrics(y_true, y_pred, k: int, report: Optional[MetricsReport] = None) -> MetricsReport:
    r = report or MetricsReport()
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch {y_true.shape} vs {y_pred.shape}")
    r.n = len(y_true)
    r.acc = float(np.mean(y_true == y_pred))
    r.per_class_f1 = f1_per_class(y_true, y_pred, range(k))
    r.f1_weighted = weighted_f1(y_true, y_pred)
    # support-weighted mean of per-class accuracy
    classes, support = np.unique(y_true, return_counts=True)
    per_acc = [np.mean(y_pred[y_true == c] == c) for c in classes]
    r.wa = float(np.dot(per_acc, support) / support.sum())
    return r


def expected_scores(probs: np.ndarray) -> np.ndarray:
    """Expected class value on the [-3, 3] scale under a class distribution."""
    return probs @ class_values(probs.shape[1])


def compute_metrics(pred, target, kind: str, k: Optional[int] = None) -> MetricsReport:
    """``kind='regression'``: pred/target are scores. ``kind='classification'``:
    pred is an N x K distribution (or labels) and target the labels; the score
    metrics are then computed from the expected class value."""
    if kind == "regression":
        return regression_metrics(pred, target)
    if kind != "classification":
        raise ValueError(f"unknown task kind {kind!r}")
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim == 2:
        k = pred.shape[1]
        labels = np.argmax(pred, axis=1)
        r = classification_metrics(target, labels, k)
        return regression_metrics(expected_scores(pred), class_values(k)[target], r)
    if k is None:
        raise ValueError("k is required when predictions are labels")
    return classification_metrics(target, pred, k)


def aggregate_runs(reports: Sequence) -> Dict[str, Dict[str, float]]:
    """Per-metric mean and sample standard deviation over runs."""
    if not reports:
        raise ValueError("aggregate_runs needs at least one report")
    rows = [r.scalars() if isinstance(r, MetricsReport) else dict(r) for r in reports]
    out = {}
    for key in rows[0]:
        vals = np.array([row[key] for row in rows], dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[key] = {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}
    return out


def write_report_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def write_aggregate(agg: Mapping[str, Mapping[str, float]], json_path, csv_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(agg, fh, indent=2, sort_keys=True)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std", "n"])
            for key, v in agg.items():
                w.writerow([key, v["mean"], v["std"], v["n"]])
