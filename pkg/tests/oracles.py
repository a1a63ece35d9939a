"""Brute-force reference implementations: explicit per-pixel loops, no shared helpers."""

import math

import numpy as np


def oracle_counts(p, g):
    tp = fp = fn = tn = 0
    for a, b in zip(np.ravel(p), np.ravel(g)):
        if a and b:
            tp += 1
        elif a and not b:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def oracle_iou(p, g):
    tp, fp, fn, _ = oracle_counts(p, g)
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def oracle_fbeta(p, g, b2=0.09):
    tp, fp, fn, _ = oracle_counts(p, g)
    if tp + fp + fn == 0:
        return 1.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    if prec + rec == 0:
        return 0.0
    return (1 + b2) * prec * rec / (b2 * prec + rec)


def oracle_enhanced(fm, gt):
    """Per-pixel enhanced alignment of a binary map, following the reference recipe."""
    fm = np.asarray(fm, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    n = gt.size
    eps = np.finfo(np.float64).eps
    if gt.sum() == 0:
        enhanced = 1.0 - fm
    elif (~gt).sum() == 0:
        enhanced = fm
    else:
        a = fm - fm.mean()
        b = gt.astype(np.float64) - gt.mean()
        xi = 2 * a * b / (a * a + b * b + eps)
        enhanced = (xi + 1) ** 2 / 4
    total = 0.0
    for v in np.ravel(enhanced):
        total += v
    return total / n


def oracle_emeasure(pred, gt):
    q = np.rint(np.clip(pred, 0, 1) * 255)
    return float(np.mean([oracle_enhanced(q >= t, gt) for t in range(256)]))


def oracle_cc(x, y):
    x = np.ravel(x).astype(np.float64)
    y = np.ravel(y).astype(np.float64)
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def oracle_mae(x, y):
    return sum(abs(a - b) for a, b in zip(np.ravel(x), np.ravel(y))) / np.size(x)


def random_pairs(count, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        gt = rng.random((size, size)) < rng.uniform(0.1, 0.7)
        noise = rng.random((size, size))
        pred = np.clip(0.6 * gt + 0.6 * noise - 0.1, 0, 1)
        yield pred, gt.astype(np.uint8)


