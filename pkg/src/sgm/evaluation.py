"""Forecast and detection metrics, persistence baseline and SGM++ blending."""
from __future__ import annotations

import numpy as np

from . import _kernels


class MetricError(ValueError):
    pass


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise MetricError("accuracy of empty input")
    return float(np.mean(pred == truth))


def iou(pred, truth) -> float:
    """|A ∩ B| / |A ∪ B|; two empty sets count as perfect agreement (1.0).

    Accepts Python sets or equal-shape boolean masks.
    """
    if isinstance(pred, (set, frozenset)) or isinstance(truth, (set, frozenset)):
        a, b = set(pred), set(truth)
        union = len(a | b)
        return 1.0 if union == 0 else len(a & b) / union
    a, b = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def iou_per_class(pred, truth, classes) -> dict:
    per = {c: iou(np.asarray(pred) == c, np.asarray(truth) == c) for c in classes}
    per["mean"] = float(np.mean(list(per.values())))
    return per


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties ½)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("AUC needs both classes present")
    return _kernels.auc_rank(scores, labels.astype(np.int64))


# ------------------------------------------------------------------ persistence / SGM++

def persistence_forecast(values: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """Forecast for hours [t, t + horizon) is the window [t - horizon, t)."""
    values = np.asarray(values)
    if horizon < 1 or t - horizon < 0 or horizon >= values.shape[-1]:
        raise MetricError(f"insufficient history: t={t}, horizon={horizon}")
    if t > values.shape[-1]:
        raise MetricError(f"t={t} beyond series length {values.shape[-1]}")
    return values[..., t - horizon:t].copy()


def sgm_plus_plus(sgm_forecast, persistence, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise MetricError(f"blend weight {alpha} outside [0, 1]")
    sgm_forecast = np.asarray(sgm_forecast, dtype=np.float64)
    persistence = np.asarray(persistence, dtype=np.float64)
    if sgm_forecast.shape != persistence.shape:
        raise MetricError("forecast and persistence shapes differ")
    return alpha * sgm_forecast + (1.0 - alpha) * persistence


def default_grid(steps: int = 21) -> np.ndarray:
    return np.linspace(0.0, 1.0, steps)


def blend_search(sgm_forecast, persistence, truth, grid=None) -> tuple[float, dict]:
    """Pick the blend weight minimizing MAE on validation windows.

    Returns ``(alpha, curve)`` where ``curve`` maps every grid point to its MAE.
    Ties resolve to the larger weight on the SGM forecast.
    """
    grid = default_grid() if grid is None else np.asarray(list(grid), dtype=np.float64)
    if grid.size == 0:
        raise MetricError("empty blend grid")
    if np.any(grid < 0) or np.any(grid > 1):
        raise MetricError("blend grid must lie in [0, 1]")
    curve = {float(a): mae(sgm_plus_plus(sgm_forecast, persistence, a), truth) for a in grid}
    best = min(curve, key=lambda a: (curve[a], -a))
    return best, curve
