"""Reconstruction-error anomaly scores from the frozen feature codec."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec as cd
from .data import format_time


@dataclass
class AnomalyScores:
    values: np.ndarray                # (N, T') higher = more anomalous
    location_ids: list[str] = field(default_factory=list)
    timestamps: np.ndarray | None = None
    source: str = "forecast"          # "forecast" or "observation"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("scores must be a (locations, hours) matrix")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("scores must be finite and non-negative")


def score(x, params: cd.CodecParams) -> np.ndarray:
    """Mean over features of the squared reconstruction error.

    ``x`` has shape (N, D, T') (features on axis 1); returns (N, T').
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected an (N, D, T) tensor, got shape {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ValueError(f"codec expects {params.in_dim} features, got {x.shape[1]}")
    rows = np.moveaxis(x, 1, -1)
    recon = cd.decode(params, cd.encode(params, rows))
    return np.mean((rows - recon) ** 2, axis=-1)


def alert_threshold(training_scores, q: float) -> float:
    """Empirical (inverse-CDF) ``q``-quantile of the training-period scores."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile {q} outside (0, 1)")
    ref = np.asarray(training_scores, dtype=np.float64).ravel()
    if ref.size == 0:
        raise ValueError("no training scores to set the alert threshold")
    return float(np.quantile(ref, q, method="inverted_cdf"))


def alert(scores, training_scores, q: float) -> np.ndarray:
    """1 where a score strictly exceeds ``alert_threshold(training_scores, q)``."""
    return (np.asarray(scores) > alert_threshold(training_scores, q)).astype(np.int64)


def export_scores(scores: AnomalyScores, path, time_format: str = "index", labels=None,
                  comment: str | None = None):
    """Labels-schema CSV plus a float ``score`` column (label column filled when known)."""
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id", "timestamp", "label", "score"])
        for i, loc in enumerate(scores.location_ids):
            for k, t in enumerate(scores.timestamps):
                lab = "" if labels is None else int(labels[i, k])
                w.writerow([loc, format_time(int(t), time_format), lab, repr(float(scores.values[i, k]))])


def read_scores(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Returns (location_ids, hour indices or raw timestamps, scores (N, T'), labels (N, T') with -1 if absent)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    locs = sorted({r["location_id"] for r in rows})
    times = sorted({r["timestamp"] for r in rows}, key=lambda s: (len(s), s))
    li = {l: i for i, l in enumerate(locs)}
    ti = {t: k for k, t in enumerate(times)}
    vals = np.zeros((len(locs), len(times)))
    labs = np.full((len(locs), len(times)), -1, dtype=np.int64)
    for r in rows:
        vals[li[r["location_id"]], ti[r["timestamp"]]] = float(r["score"])
        if r["label"] != "":
            labs[li[r["location_id"]], ti[r["timestamp"]]] = int(r["label"])
    return locs, np.array(times), vals, labs
