"""Segmentation metrics: IoU, F-measure, E-measure, Pearson CC, MAE, and
threshold-swept precision/recall/F curves.

Continuous maps are probabilities in [0, 1]. Threshold sweeps work on the
8-bit quantization ``round(255 * p)`` and binarize with ``q >= t`` for
``t = 0..255``, which is exactly what a map written to disk reproduces.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BETA = 0.3
N_THRESHOLDS = 256
_EPS = np.finfo(np.float64).eps
METRIC_NAMES = ("iou", "fbeta", "ephi", "cc", "mae")


class DegenerateMetricWarning(RuntimeWarning):
    pass


def _pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def _binary(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == bool:
        return x
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("expected a binary map")
    return x.astype(bool)


def quantize(pred) -> np.ndarray:
    return np.rint(np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0) * 255).astype(np.int64)


def beta_sq(beta: float = BETA, beta_squared: float | None = None) -> float:
    return float(beta_squared) if beta_squared is not None else float(beta) ** 2


def confusion(pred, gt) -> tuple[int, int, int]:
    pred, gt = _pair(pred, gt)
    p, g = _binary(pred), _binary(gt)
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p & ~g)), int(np.count_nonzero(~p & g))


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    p, g = _binary(pred), _binary(gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def f_beta_from_counts(tp, fp, fn, b2: float) -> float:
    if tp == fp == fn == 0:
        return 1.0
    denom = (1 + b2) * tp + b2 * fn + fp
    return (1 + b2) * tp / denom if denom > 0 else 0.0


def f_beta(pred, gt, beta: float = BETA, beta_squared: float | None = None) -> float:
    """``(1 + b^2) TP / ((1 + b^2) TP + b^2 FN + FP)``.

    ``beta`` is taken literally (b^2 = 0.09 by default); pass
    ``beta_squared=0.3`` for the salient-object-detection convention.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    return f_beta_from_counts(*confusion(pred, gt), beta_sq(beta, beta_squared))


def _enhanced_from_counts(tp, fp, fn, tn) -> float:
    """Enhanced alignment score of a binary map from its confusion counts.

    Centering a binary map leaves two values per map, so the per-pixel
    alignment takes one of four values weighted by the four counts.
    """
    n = tp + fp + fn + tn
    fg_gt = tp + fn
    fg_pred = tp + fp
    if fg_gt == 0:
        return (n - fg_pred) / n
    if fg_gt == n:
        return fg_pred / n
    mu_p, mu_g = fg_pred / n, fg_gt / n
    total = 0.0
    for count, p, g in ((tp, 1, 1), (fp, 1, 0), (fn, 0, 1), (tn, 0, 0)):
        if count:
            a, b = p - mu_p, g - mu_g
            xi = 2 * a * b / (a * a + b * b + _EPS)
            total += count * (1 + xi) ** 2 / 4
    return total / n


def enhanced_alignment(pred_binary, gt) -> float:
    pred_binary, gt = _pair(pred_binary, gt)
    tp, fp, fn = confusion(pred_binary, gt)
    return _enhanced_from_counts(tp, fp, fn, pred_binary.size - tp - fp - fn)


def _threshold_counts(pred, gt):
    """TP, FP, FN arrays over thresholds 0..255 (``q >= t``)."""
    q = quantize(pred).ravel()
    g = _binary(gt).ravel()
    fg_hist = np.bincount(q[g], minlength=N_THRESHOLDS)
    bg_hist = np.bincount(q[~g], minlength=N_THRESHOLDS)
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    fn = g.sum() - tp
    return tp, fp, fn


def e_measure(pred, gt, threshold="mean") -> float:
    """Enhanced-alignment measure.

    ``threshold``: ``"mean"`` averages over the 256 quantized thresholds,
    ``"adaptive"`` binarizes at twice the mean prediction, a float binarizes
    ``pred >= threshold``.
    """
    pred, gt = _pair(pred, gt)
    if threshold == "mean":
        tp, fp, fn = _threshold_counts(pred, gt)
        tn = pred.size - tp - fp - fn
        return float(np.mean([_enhanced_from_counts(*c) for c in zip(tp, fp, fn, tn)]))
    return enhanced_alignment(binarize(pred, threshold), gt)


def cc(pred, gt) -> float:
    """Pearson correlation; 0.0 (with a warning) when either map is constant."""
    pred, gt = _pair(pred, gt)
    x = pred.astype(np.float64).ravel()
    y = gt.astype(np.float64).ravel()
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0.0:
        warnings.warn("correlation undefined for a constant map; reporting 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred.astype(np.float64) - gt.astype(np.float64))))


def binarize(pred, threshold=0.5) -> np.ndarray:
    """``threshold`` is a float or ``"adaptive"`` (twice the mean, capped at 1)."""
    pred = np.asarray(pred, dtype=np.float64)
    if threshold == "adaptive":
        threshold = min(2.0 * float(pred.mean()), 1.0)
    return pred >= float(threshold)


def best_threshold(pred, gt) -> float:
    """Threshold in {t/255} that maximizes IoU for this image."""
    tp, fp, fn = _threshold_counts(pred, gt)
    union = tp + fp + fn
    scores = np.where(union > 0, tp / np.maximum(union, 1), 1.0)
    return int(np.argmax(scores)) / 255.0


@dataclass
class Curves:
    thresholds: np.ndarray  # 0..255
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray

    def rows(self):
        for t, p, r, f in zip(self.thresholds, self.precision, self.recall, self.fmeasure):
            yield int(t), float(p), float(r), float(f)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "fmeasure"])
            w.writerows(self.rows())


def threshold_curves(preds, gts, beta: float = BETA, beta_squared: float | None = None) -> Curves:
    """Precision, recall and F at each threshold, counts pooled over all images."""
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("threshold_curves needs at least one image")
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    tp = np.zeros(N_THRESHOLDS, dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    for p, g in zip(preds, gts):
        p, g = _pair(p, g)
        a, b, c = _threshold_counts(p, g)
        tp += a
        fp += b
        fn += c
    b2 = beta_sq(beta, beta_squared)
    precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    fmeasure = np.array([f_beta_from_counts(a, b, c, b2) for a, b, c in zip(tp, fp, fn)])
    return Curves(np.arange(N_THRESHOLDS), precision, recall, fmeasure)


def image_scores(pred, gt, threshold=0.5, beta: float = BETA, beta_squared: float | None = None) -> dict:
    """All five metrics for one probability map against one binary mask.

    ``threshold`` binarizes for IoU and F: a float, ``"adaptive"`` or ``"best"``.
    """
    pred, gt = _pair(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    if threshold == "best":
        threshold = best_threshold(pred, gt)
    pb = binarize(pred, threshold)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        corr = cc(pred, gt)
    return {
        "iou": iou(pb, gt),
        "fbeta": f_beta(pb, gt, beta, beta_squared),
        "ephi": e_measure(pred, gt),
        "cc": corr,
        "mae": mae(pred, gt),
    }


@dataclass
class MetricReport:
    fold_id: int | None = None
    rows: list[dict] = field(default_factory=list)  # image_id, category, and METRIC_NAMES
    curves: Curves | None = None

    def add(self, image_id: str, category: str, scores: dict) -> None:
        self.rows.append({"image_id": image_id, "category": category, **{k: float(scores[k]) for k in METRIC_NAMES}})

    def means(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in METRIC_NAMES}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_NAMES}

    def category_means(self) -> dict[str, dict]:
        out: dict[str, list] = {}
        for r in self.rows:
            out.setdefault(r["category"], []).append(r)
        return {c: {k: float(np.mean([r[k] for r in rs])) for k in METRIC_NAMES} for c, rs in sorted(out.items())}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["image_id", "category", *METRIC_NAMES])
            w.writeheader()
            w.writerows(self.rows)

    def category_table_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", *METRIC_NAMES])
            for cat, m in self.category_means().items():
                w.writerow([cat, *(f"{m[k]:.3f}" for k in METRIC_NAMES)])

    def to_json(self, path=None) -> dict:
        obj = {"fold": self.fold_id, "images": len(self.rows), "mean": self.means(),
               "categories": self.category_means()}
        if path is not None:
            Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
        return obj
