"""Seeded ground-truth generators and recovery reports."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import EventLabels, TensorSeries


class GenerationError(RuntimeError):
    pass


@dataclass
class GroundTruth:
    dag: np.ndarray | None = None                # (N, N) binary, edge i -> j at [i, j]
    weights: np.ndarray | None = None            # (N, N) SEM weights
    granger: np.ndarray | None = None            # (L, N, N) coefficients, [l, i, j] = effect of j on i
    noise_std: float = 1.0
    anomaly_mask: np.ndarray | None = None       # (N, T)
    extras: dict = field(default_factory=dict)

    def granger_edges(self) -> np.ndarray:
        """Binary (source, target) matrix: [j, i] = 1 iff j Granger-causes i."""
        return (np.abs(self.granger).sum(axis=0) > 0).T.astype(int)


def random_dag_weights(n: int, edge_prob: float, rng, low=0.5, high=2.0) -> np.ndarray:
    """Weighted DAG from a random topological order; weights ±U(low, high)."""
    upper = np.triu(rng.random((n, n)) < edge_prob, k=1)
    w = upper * rng.uniform(low, high, size=(n, n)) * rng.choice([-1.0, 1.0], size=(n, n))
    perm = rng.permutation(n)
    return w[np.ix_(perm, perm)]


def gen_sem(n: int, edge_prob: float, samples: int, noise_std: float = 1.0, seed: int = 0,
            weights: np.ndarray | None = None) -> tuple[GroundTruth, np.ndarray]:
    """Linear Gaussian SEM x = Aᵀx + ε; returns data of shape (samples, n)."""
    if n < 2:
        raise ValueError("gen_sem needs n >= 2")
    if not 0.0 < edge_prob < 1.0 and weights is None:
        raise ValueError("edge_prob must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    w = random_dag_weights(n, edge_prob, rng) if weights is None else np.asarray(weights, dtype=np.float64)
    eps = rng.normal(0.0, noise_std, size=(samples, n))
    # rows: x = eps (I - A)^{-1}, i.e. (I - Aᵀ) xᵀ = epsᵀ
    x = np.linalg.solve(np.eye(n) - w.T, eps.T).T
    truth = GroundTruth(dag=(w != 0).astype(int), weights=w, noise_std=noise_std)
    return truth, x


def _companion_radius(coefs: np.ndarray) -> float:
    lag, n, _ = coefs.shape
    comp = np.zeros((lag * n, lag * n))
    comp[:n] = np.concatenate(list(coefs), axis=1)
    if lag > 1:
        comp[n:, :-n] = np.eye((lag - 1) * n)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def random_var_coefs(n: int, lag: int, sparsity: float, rng, self_weight=0.4, cross_weight=0.6) -> np.ndarray:
    """(lag, N, N) coefficients sharing one cross-variable edge mask across lags.

    ``sparsity`` is the fraction of absent off-diagonal edges.
    """
    mask = (rng.random((n, n)) >= sparsity) & ~np.eye(n, dtype=bool)
    coefs = np.zeros((lag, n, n))
    decay = 1.0 / np.arange(1, lag + 1)
    for l in range(lag):
        signs = rng.choice([-1.0, 1.0], size=(n, n))
        coefs[l] = mask * signs * rng.uniform(0.5, 1.0, size=(n, n)) * cross_weight * decay[l]
        coefs[l][np.diag_indices(n)] = self_weight * decay[l] * rng.uniform(0.5, 1.0, size=n)
    return coefs


def gen_var(n: int, d: int, t_len: int, lag: int = 4, sparsity: float = 0.8, seed: int = 0,
            coefs: np.ndarray | None = None, noise_std: float = 1.0, burn_in: int = 200,
            target_radius: float = 0.95) -> tuple[GroundTruth, TensorSeries]:
    """VAR(lag) over N locations; each of the D features is an independent
    realisation sharing the same coefficients ``H_t = Σ_l W_l H_{t-l} + e_t``.
    """
    rng = np.random.default_rng(seed)
    if coefs is None:
        coefs = random_var_coefs(n, lag, sparsity, rng)
    coefs = np.array(coefs, dtype=np.float64)
    if coefs.ndim == 2:
        coefs = coefs[None]
    lag = coefs.shape[0]
    for _ in range(100):
        if _companion_radius(coefs) < target_radius:
            break
        coefs *= 0.95
    else:
        raise GenerationError("could not rescale VAR coefficients to a stable system")
    noise = rng.normal(0.0, noise_std, size=(burn_in + t_len, n, d))
    sim = _kernels.var_simulate(np.ascontiguousarray(coefs), noise, np.zeros((lag, n, d)))
    values = np.ascontiguousarray(sim[burn_in:].transpose(1, 2, 0))
    if not np.all(np.isfinite(values)) or np.abs(values).max() > 1e6:
        raise GenerationError("VAR simulation is unstable")
    series = TensorSeries(values, [f"loc-{i:03d}" for i in range(n)], [f"f{j}" for j in range(d)],
                          np.arange(t_len, dtype=np.int64))
    return GroundTruth(granger=coefs, noise_std=noise_std), series


def inject_anomalies(series: TensorSeries, rate: float = 0.005, magnitude_sigmas: float = 8.0,
                     seed: int = 0, n_features: int = 3) -> tuple[TensorSeries, EventLabels]:
    """Add spikes of ``magnitude_sigmas`` x feature std to random (location, hour) cells."""
    if not 0.0 < rate < 0.05:
        raise ValueError("anomaly rate must lie in (0, 0.05)")
    rng = np.random.default_rng(seed)
    n, d, t = series.shape
    mask = rng.random((n, t)) < rate
    std = series.values.std(axis=2)
    values = series.values.copy()
    k = min(n_features, d)
    for i, j in np.argwhere(mask):
        feats = rng.choice(d, size=k, replace=False)
        values[i, feats, j] += magnitude_sigmas * std[i, feats]
    labels = EventLabels(mask.astype(int), list(series.location_ids), series.timestamps.copy())
    return series.with_values(values), labels


def gen_drifting_dags(n: int, steps: int, edge_prob: float = 0.2, flips_per_step: int = 1,
                      seed: int = 0) -> np.ndarray:
    """Sequence of weighted DAGs over a fixed node order where each step
    toggles ``flips_per_step`` upper-triangular cells (slow structural drift)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    upper = np.triu_indices(n, k=1)
    cur = np.zeros((n, n))
    on = rng.random(len(upper[0])) < edge_prob
    cur[upper[0][on], upper[1][on]] = rng.uniform(0.5, 2.0, size=on.sum())
    out = np.empty((steps, n, n))
    for s in range(steps):
        if s > 0:
            for c in rng.choice(len(upper[0]), size=flips_per_step, replace=False):
                i, j = upper[0][c], upper[1][c]
                cur[i, j] = 0.0 if cur[i, j] != 0 else rng.uniform(0.5, 2.0)
        out[s] = cur[np.ix_(perm, perm)]
    return out


def edge_recovery_report(estimated, truth, thresholds=(0.1, 0.2, 0.3, 0.5)) -> dict:
    """Edge AUC of |estimated| against binary truth (diagonal excluded) and
    structural Hamming distance of the thresholded estimate."""
    from .evaluation import auc_roc

    est = np.abs(np.asarray(estimated, dtype=np.float64))
    truth = (np.asarray(truth) != 0).astype(int)
    if est.shape != truth.shape or est.shape[0] != est.shape[1]:
        raise ValueError(f"size mismatch {est.shape} vs {truth.shape}")
    off = ~np.eye(est.shape[0], dtype=bool)
    np.fill_diagonal(truth, 0)
    labels = truth[off]
    auc = auc_roc(est[off], labels) if 0 < labels.sum() < labels.size else float("nan")
    shd = {float(th): _kernels.shd((est > th) & off, truth) for th in thresholds}
    return {"auc": auc, "shd": shd}
