"""Feature autoencoder mapping per-location feature vectors X(n,:,t) to latents.

encoder: h = W2 tanh(W1 x + b1) + b2
decoder: x = V2 tanh(V1 h + c1) + c2
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


class CodecDivergenceError(nx.NumericsError):
    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


@dataclass
class CodecParams:
    weights: dict[str, np.ndarray]
    history: list[tuple[int, float]] = field(default_factory=list)
    final_mse: float = float("nan")

    @property
    def in_dim(self):
        return self.weights["enc_w1"].shape[0]

    @property
    def h_dim(self):
        return self.weights["enc_w2"].shape[1]

    def to_json(self) -> dict:
        return {
            "shapes": {k: list(self.weights[k].shape) for k in PARAM_NAMES},
            "values": {k: self.weights[k].ravel().tolist() for k in PARAM_NAMES},
            "history": [list(h) for h in self.history],
            "final_mse": self.final_mse,
        }

    @classmethod
    def from_json(cls, doc) -> "CodecParams":
        w = {k: np.array(doc["values"][k], dtype=np.float64).reshape(doc["shapes"][k]) for k in PARAM_NAMES}
        return cls(w, [tuple(h) for h in doc.get("history", [])], doc.get("final_mse", float("nan")))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "CodecParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_params(in_dim: int, h_dim: int, hidden: int = 32, seed: int = 0) -> CodecParams:
    if h_dim < 1 or in_dim < 1:
        raise ValueError("codec widths must be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(a, b):
        return rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b))

    w = {
        "enc_w1": glorot(in_dim, hidden), "enc_b1": np.zeros(hidden),
        "enc_w2": glorot(hidden, h_dim), "enc_b2": np.zeros(h_dim),
        "dec_w1": glorot(h_dim, hidden), "dec_b1": np.zeros(hidden),
        "dec_w2": glorot(hidden, in_dim), "dec_b2": np.zeros(in_dim),
    }
    return CodecParams(w)


def identity_params(dim: int, scale: float = 1e-2) -> CodecParams:
    """Linear-regime identity codec: exact up to tanh curvature for small inputs."""
    eye = np.eye(dim)
    w = {
        "enc_w1": eye * scale, "enc_b1": np.zeros(dim),
        "enc_w2": eye / scale, "enc_b2": np.zeros(dim),
        "dec_w1": eye * scale, "dec_b1": np.zeros(dim),
        "dec_w2": eye / scale, "dec_b2": np.zeros(dim),
    }
    return CodecParams(w)


def _encode(w, x):
    return nx.matmul(nx.tanh(nx.matmul(x, w["enc_w1"]) + w["enc_b1"]), w["enc_w2"]) + w["enc_b2"]


def _decode(w, h):
    return nx.matmul(nx.tanh(nx.matmul(h, w["dec_w1"]) + w["dec_b1"]), w["dec_w2"]) + w["dec_b2"]


def encode(params: CodecParams, x) -> np.ndarray:
    """Map rows of width D (any leading shape) to rows of width h_dim."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"encode expects width {params.in_dim}, got {x.shape[-1]}")
    flat = x.reshape(-1, x.shape[-1])
    return _encode(params.weights, flat).reshape(x.shape[:-1] + (params.h_dim,))


def decode(params: CodecParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.h_dim:
        raise ValueError(f"decode expects width {params.h_dim}, got {h.shape[-1]}")
    flat = h.reshape(-1, h.shape[-1])
    return _decode(params.weights, flat).reshape(h.shape[:-1] + (params.in_dim,))


def reconstruction_mse(params: CodecParams, rows) -> float:
    rows = np.asarray(rows, dtype=np.float64)
    return float(np.mean((decode(params, encode(params, rows)) - rows) ** 2))


def series_rows(values: np.ndarray, time_index=None) -> np.ndarray:
    """(N, D, T) tensor -> (N * T', D) matrix of per-location feature rows."""
    v = values if time_index is None else values[:, :, time_index]
    return np.ascontiguousarray(v.transpose(0, 2, 1).reshape(-1, v.shape[1]))


def codec_loss(weights, rows):
    return nx.mse(_decode(weights, _encode(weights, rows)), rows)


def codec_train(rows, h_dim: int = 16, epochs: int = 500, lr: float = 1e-2, seed: int = 0,
                hidden: int = 32, checkpoint_every: int = 10, init: CodecParams | None = None) -> CodecParams:
    """Full-batch Adam on reconstruction MSE.

    Returns the parameters of the best logged checkpoint, so the logged
    best-so-far curve is non-increasing and ``final_mse`` is the MSE of the
    returned parameters on ``rows``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    params = init if init is not None else init_params(rows.shape[1], h_dim, hidden, seed)
    w = {k: v.copy() for k, v in params.weights.items()}
    opt = nx.Adam(w, lr=lr)
    best = {k: v.copy() for k, v in w.items()}
    best_loss = float(codec_loss(w, rows))
    history = [(0, best_loss)]
    for epoch in range(1, epochs + 1):
        tape = nx.Tape()
        leaves = {k: tape.leaf(v) for k, v in w.items()}
        loss = codec_loss(leaves, rows)
        value = float(loss.value)
        if not np.isfinite(value):
            raise CodecDivergenceError(f"codec loss diverged at epoch {epoch}", CodecParams(best, history, best_loss))
        grads = nx.grad(loss, list(leaves.values()))
        opt.step(dict(zip(leaves.keys(), grads)))
        if epoch % checkpoint_every == 0 or epoch == epochs:
            current = float(codec_loss(w, rows))
            if not np.isfinite(current):
                raise CodecDivergenceError(f"codec loss diverged at epoch {epoch}",
                                           CodecParams(best, history, best_loss))
            if current <= best_loss:
                best_loss = current
                best = {k: v.copy() for k, v in w.items()}
            history.append((epoch, best_loss))
    return CodecParams(best, history, best_loss)
