"""Classification metrics over label sequences."""

from __future__ import annotations

import numpy as np


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of per-class F1 over classes seen in truth or prediction."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("label sequences differ in length")
    if y_true.size == 0:
        return 0.0
    scores = []
    for k in np.union1d(y_true, y_pred):
        tp = np.sum((y_true == k) & (y_pred == k))
        fp = np.sum((y_true != k) & (y_pred == k))
        fn = np.sum((y_true == k) & (y_pred != k))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred))) if y_true.size else 0.0


def rolling_f1(y_true, y_pred, window: int = 100) -> np.ndarray:
    """Macro-F1 over each trailing window; entry ``i`` covers samples ``i .. i+window-1``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = len(y_true) - window + 1
    if n <= 0:
        return np.zeros(0)
    return np.array([macro_f1(y_true[i : i + window], y_pred[i : i + window]) for i in range(n)])
