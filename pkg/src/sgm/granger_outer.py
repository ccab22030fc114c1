"""DAG-conditioned diffusion-convolutional GRU forecaster (seq2seq).

For a window of ``lag`` observed pairs (A_t, H_t) the encoder cell folds the
latents into a hidden state; the decoder cell then rolls out ``horizon``
steps, feeding each prediction back as the next input and reusing the last
observed graph.  Graphs enter through Gumbel-softmax refinement of the inner
adjacency plus a learned logit offset shared over time.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import contiguous_runs

log = logging.getLogger(__name__)

GATES = ("r", "u", "c")
CELLS = ("enc", "dec")


class OuterDivergenceError(nx.NumericsError):
    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    seed: int = 0
    noise: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("Gumbel temperature must be positive")


@dataclass
class ForecasterConfig:
    n_nodes: int
    in_dim: int
    hidden: int = 32
    order: int = 2                    # diffusion order K
    lag: int = 4                      # L
    horizon: int = 4                  # tau
    per_variable: bool = False
    learn_structure: bool = True
    xi0: float = 1.0
    xi_decay: float = 0.97
    xi_min: float = 0.1
    epochs: int = 40
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 1
    alternate_every: int = 5
    max_alternations: int = 3

    def __post_init__(self):
        if self.order < 0 or self.lag < 1 or self.horizon < 1:
            raise ValueError("need order >= 0, lag >= 1, horizon >= 1")


@dataclass
class ForecasterParams:
    config: ForecasterConfig
    weights: dict[str, np.ndarray]
    xi: float = 1.0
    history: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "xi": self.xi,
            "shapes": {k: list(v.shape) for k, v in self.weights.items()},
            "values": {k: v.ravel().tolist() for k, v in self.weights.items()},
            "history": self.history,
        }

    @classmethod
    def from_json(cls, doc) -> "ForecasterParams":
        w = {k: np.array(v, dtype=np.float64).reshape(doc["shapes"][k]) for k, v in doc["values"].items()}
        return cls(ForecasterConfig(**doc["config"]), w, doc["xi"], doc.get("history", []))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def copy(self):
        return ForecasterParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.xi,
                                list(self.history))


@dataclass
class ForecastResult:
    hidden: np.ndarray                 # (N, F, tau)
    decoded: np.ndarray | None = None  # (N, D, tau)

    def __post_init__(self):
        if not np.all(np.isfinite(self.hidden)):
            raise nx.NumericsError("forecast contains non-finite values")


def init_params(cfg: ForecasterConfig, scale: float = 1.0, zero: bool = False) -> ForecasterParams:
    rng = np.random.default_rng(cfg.seed)
    fin = cfg.in_dim + cfg.hidden
    lead = (cfg.n_nodes,) if cfg.per_variable else ()
    w = {}
    for cell in CELLS:
        for gate in GATES:
            shape = lead + (2, cfg.order + 1, fin, cfg.hidden)
            std = scale * np.sqrt(1.0 / (2 * (cfg.order + 1) * fin))
            w[f"{cell}_{gate}_theta"] = np.zeros(shape) if zero else rng.normal(0.0, std, size=shape)
            # update gate starts biased towards keeping state
            w[f"{cell}_{gate}_b"] = np.full(cfg.hidden, 1.0 if gate == "u" and not zero else 0.0)
    pshape = lead + (cfg.hidden, cfg.in_dim)
    w["proj_w"] = np.zeros(pshape) if zero else rng.normal(0.0, scale * np.sqrt(1.0 / cfg.hidden), size=pshape)
    w["proj_b"] = np.zeros(cfg.in_dim)
    w["delta"] = np.zeros((cfg.n_nodes, cfg.n_nodes))
    return ForecasterParams(cfg, w, cfg.xi0)


# ------------------------------------------------------------------ graph ops

def _diag_mask(n):
    m = np.zeros((n, n))
    m[np.diag_indices(n)] = -np.inf
    return m


def sample_gumbel(shape, rng) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def _refine(logits, xi, noise=None):
    """Row softmax of (logits + g) / xi with the diagonal excluded."""
    v = logits.value if isinstance(logits, nx.Node) else np.asarray(logits)
    x = logits if noise is None else nx.add(logits, noise)
    return nx.softmax_rows(nx.add(nx.mul(x, 1.0 / xi), _diag_mask(v.shape[-1])))


def gumbel_refine(a_inner, config: GumbelConfig | None = None) -> np.ndarray:
    """A_outer[i, :] = softmax((A_inner[i, :] + g_i) / ξ) over off-diagonal j.

    ``config.noise=False`` sets g = 0 (deterministic test mode).
    """
    cfg = config or GumbelConfig()
    a = np.asarray(a_inner, dtype=np.float64)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("adjacency must be square")
    noise = sample_gumbel(a.shape, np.random.default_rng(cfg.seed)) if cfg.noise else None
    return _refine(a, cfg.temperature, noise)


def _row_normalize(a):
    return nx.mul(a, nx.safe_reciprocal(nx.sum_(a, axis=-1, keepdims=True)))


def transition_matrices(a):
    """(D_out⁻¹ A, D_in⁻¹ Aᵀ); rows of zero-degree nodes are all zero."""
    return _row_normalize(a), _row_normalize(nx.transpose(a))


def _diffuse(p_out, p_in, x, order):
    feats = [x]
    cur = x
    for _ in range(order):
        cur = nx.matmul(p_out, cur)
        feats.append(cur)
    feats.append(x)
    cur = x
    for _ in range(order):
        cur = nx.matmul(p_in, cur)
        feats.append(cur)
    return nx.concat(feats, axis=-1)


def diffusion_conv(a, x, theta_out, theta_in, order: int):
    """Σ_k θ_{k,1}(D_out⁻¹A)^k X + θ_{k,2}(D_in⁻¹Aᵀ)^k X.

    ``theta_out``/``theta_in`` are length-(order+1) sequences of scalars or
    (F_in, F_out) matrices.
    """
    if len(theta_out) != order + 1 or len(theta_in) != order + 1:
        raise ValueError("need order + 1 coefficients per direction")
    p_out, p_in = transition_matrices(a)
    total = None
    for p, thetas in ((p_out, theta_out), (p_in, theta_in)):
        cur = x
        for k in range(order + 1):
            if k:
                cur = nx.matmul(p, cur)
            th = thetas[k]
            term = nx.matmul(cur, th) if np.ndim(th.value if isinstance(th, nx.Node) else th) == 2 else nx.mul(cur, th)
            total = term if total is None else nx.add(total, term)
    return total


def _flat_theta(w, key, cfg):
    theta = w[key]
    fin = cfg.in_dim + cfg.hidden
    rows = 2 * (cfg.order + 1) * fin
    shape = (cfg.n_nodes, rows, cfg.hidden) if cfg.per_variable else (rows, cfg.hidden)
    return nx.reshape(theta, shape)


def _apply(feats, weight, cfg):
    return nx.per_node_matmul(feats, weight) if cfg.per_variable else nx.matmul(feats, weight)


def dcgru_step(h, s_prev, p_out, p_in, w, cell: str, cfg: ForecasterConfig):
    """One gated step with gate maps given by diffusion convolution over the graph."""
    flat = {g: _flat_theta(w, f"{cell}_{g}_theta", cfg) for g in GATES}
    xs = _diffuse(p_out, p_in, nx.concat([h, s_prev], axis=-1), cfg.order)
    r = nx.sigmoid(nx.add(_apply(xs, flat["r"], cfg), w[f"{cell}_r_b"]))
    u = nx.sigmoid(nx.add(_apply(xs, flat["u"], cfg), w[f"{cell}_u_b"]))
    xc = _diffuse(p_out, p_in, nx.concat([h, nx.mul(r, s_prev)], axis=-1), cfg.order)
    c = nx.tanh(nx.add(_apply(xc, flat["c"], cfg), w[f"{cell}_c_b"]))
    return nx.add(nx.mul(u, s_prev), nx.mul(nx.sub(1.0, u), c))


def _project(s, w, cfg):
    return nx.add(_apply(s, w["proj_w"], cfg), w["proj_b"])


def seq2seq(w, cfg: ForecasterConfig, a_win, h_win, xi: float, noise=None):
    """Batched forward pass.

    ``a_win`` (B, L, N, N) inner adjacencies, ``h_win`` (B, L, N, F) latents,
    optional Gumbel ``noise`` shaped like ``a_win``.  Returns a list of
    ``horizon`` predictions, each (B, N, F).
    """
    b, lag, n, _ = a_win.shape
    s = np.zeros((b, n, cfg.hidden))
    p = None
    for l in range(lag):
        logits = nx.add(a_win[:, l], w["delta"]) if cfg.learn_structure else a_win[:, l]
        a_ref = _refine(logits, xi, None if noise is None else noise[:, l])
        p = transition_matrices(a_ref)
        s = dcgru_step(h_win[:, l], s, p[0], p[1], w, "enc", cfg)
    x = h_win[:, -1]
    preds = []
    for _ in range(cfg.horizon):
        s = dcgru_step(x, s, p[0], p[1], w, "dec", cfg)
        x = _project(s, w, cfg)
        preds.append(x)
    return preds


def forecast_loss(w, cfg, a_win, h_win, target, xi, noise=None):
    """Mean absolute error over (window, step, node, feature)."""
    preds = seq2seq(w, cfg, a_win, h_win, xi, noise)
    total = None
    for k, pred in enumerate(preds):
        term = nx.mean_abs(pred, target[:, k])
        total = term if total is None else nx.add(total, term)
    return nx.mul(total, 1.0 / len(preds))


# ------------------------------------------------------------------ windows

def window_starts(index, lag: int, horizon: int) -> np.ndarray:
    """Start times s with [s, s + lag + horizon) inside one contiguous run of ``index``."""
    starts = []
    for a, b in contiguous_runs(index):
        starts.extend(range(a, b - lag - horizon + 1))
    return np.array(starts, dtype=np.int64)


def gather_windows(hidden, adjacency, starts, lag, horizon):
    idx_in = starts[:, None] + np.arange(lag)[None]
    idx_out = starts[:, None] + lag + np.arange(horizon)[None]
    return adjacency[idx_in], hidden[idx_in], hidden[idx_out]


def predict(params: ForecasterParams, hidden, adjacency, starts, chunk: int = 512) -> np.ndarray:
    """Deterministic (g = 0) forecasts for windows starting at ``starts``; (B, tau, N, F)."""
    cfg = params.config
    out = []
    for k in range(0, len(starts), chunk):
        a_win, h_win, _ = gather_windows(hidden, adjacency, starts[k:k + chunk], cfg.lag, 0)
        preds = seq2seq(params.weights, cfg, a_win, h_win, params.xi)
        out.append(np.stack(preds, axis=1))
    if not out:
        return np.zeros((0, cfg.horizon, hidden.shape[1], hidden.shape[2]))
    return np.concatenate(out)


def forecast(window, params: ForecasterParams, seed: int | None = None) -> ForecastResult:
    """Forecast ``horizon`` steps from a length-``lag`` sequence of (A, H) pairs.

    With ``seed`` the Gumbel noise is sampled from that seed; otherwise g = 0.
    """
    cfg = params.config
    if len(window) != cfg.lag:
        raise ValueError(f"window has {len(window)} pairs, forecaster lag is {cfg.lag}")
    a_win = np.stack([np.asarray(a, dtype=np.float64) for a, _ in window])[None]
    h_win = np.stack([np.asarray(h, dtype=np.float64) for _, h in window])[None]
    noise = None if seed is None else sample_gumbel(a_win.shape, np.random.default_rng(seed))
    preds = seq2seq(params.weights, cfg, a_win, h_win, params.xi, noise)
    return ForecastResult(np.stack([p[0] for p in preds], axis=-1))


# ------------------------------------------------------------------ training

@dataclass
class OuterResult:
    params: ForecasterParams
    adjacency: np.ndarray             # inner adjacency after any refreshes (T, N, N)
    history: list


def fit_outer(hidden, adjacency, cfg: ForecasterConfig, train_index=None,
              refresh: Callable[[np.ndarray], np.ndarray] | None = None,
              init: ForecasterParams | None = None, valid_index=None) -> OuterResult:
    """Minimize the forecast MAE over all training windows with Adam.

    ``refresh(logits)`` (optional) re-runs the inner optimization on the
    current structure logits every ``alternate_every`` epochs, at most
    ``max_alternations`` times; the learned offset is folded into the new
    inner graphs.  Returns the best checkpoint since the last refresh, ranked
    by training MAE, or by MAE on ``valid_index`` windows when given (only
    checkpoints whose training MAE does not exceed the initial one qualify).
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    adjacency = np.array(adjacency, dtype=np.float64)
    t_len = hidden.shape[0]
    if adjacency.shape[0] != t_len:
        raise ValueError("hidden and adjacency sequences differ in length")
    index = np.arange(t_len) if train_index is None else np.asarray(train_index)
    starts = window_starts(index, cfg.lag, cfg.horizon)
    if len(starts) == 0:
        raise ValueError("no complete training windows")
    params = init.copy() if init is not None else init_params(cfg)
    w = params.weights
    rng = np.random.default_rng(cfg.seed + 7919)
    opt = nx.Adam(w, lr=cfg.lr)

    valid = None if valid_index is None else window_starts(np.asarray(valid_index), cfg.lag, cfg.horizon)
    if valid is not None and len(valid) == 0:
        raise ValueError("no complete validation windows")

    def full_mae(xi, which=starts):
        total = 0.0
        for k in range(0, len(which), 512):
            a_win, h_win, target = gather_windows(hidden, adjacency, which[k:k + 512], cfg.lag, cfg.horizon)
            total += float(forecast_loss(w, cfg, a_win, h_win, target, xi)) * len(a_win)
        return total / len(which)

    def checkpoint(epoch, xi):
        entry = {"epoch": epoch, "mae": full_mae(xi), "xi": xi}
        if valid is not None:
            entry["valid_mae"] = full_mae(xi, valid)
        return entry

    def rank(entry):
        if valid is None:
            return entry["mae"]
        return entry["valid_mae"] if entry["mae"] <= history[0]["mae"] else np.inf

    xi = cfg.xi0
    history = [checkpoint(0, xi)]
    best = ForecasterParams(cfg, {k: v.copy() for k, v in w.items()}, xi)
    best_mae = rank(history[0])
    alternations = 0
    for epoch in range(1, cfg.epochs + 1):
        xi = max(cfg.xi_min, cfg.xi0 * cfg.xi_decay ** epoch)
        order = rng.permutation(len(starts))
        for k in range(0, len(order), cfg.batch_size):
            batch = starts[np.sort(order[k:k + cfg.batch_size])]
            a_win, h_win, target = gather_windows(hidden, adjacency, batch, cfg.lag, cfg.horizon)
            noise = sample_gumbel(a_win.shape, rng)
            tape = nx.Tape()
            leaves = {name: tape.leaf(v) for name, v in w.items()}
            loss = forecast_loss(leaves, cfg, a_win, h_win, target, xi, noise)
            if not np.isfinite(loss.value):
                raise OuterDivergenceError(f"forecaster loss diverged at epoch {epoch}", best)
            grads = nx.grad(loss, list(leaves.values()))
            opt.step(dict(zip(leaves.keys(), grads)))
        if refresh is not None and epoch % cfg.alternate_every == 0 and alternations < cfg.max_alternations:
            adjacency = np.asarray(refresh(adjacency + w["delta"]), dtype=np.float64)
            w["delta"][:] = 0.0
            opt.m["delta"][:] = 0.0
            opt.v["delta"][:] = 0.0
            alternations += 1
            best_mae = np.inf
            history.append({"epoch": epoch, "event": "inner_refresh"})
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            entry = checkpoint(epoch, xi)
            if not np.isfinite(entry["mae"]):
                raise OuterDivergenceError(f"forecaster loss diverged at epoch {epoch}", best)
            history.append(entry)
            log.debug("outer epoch %d: %s", epoch, entry)
            if rank(entry) <= best_mae:
                best_mae = rank(entry)
                best = ForecasterParams(cfg, {k: v.copy() for k, v in w.items()}, xi)
    best.history = history
    return OuterResult(best, adjacency, history)


# ------------------------------------------------------------------ interpretation

def effective_weights(params: ForecasterParams, a_refined) -> np.ndarray:
    """max_{cell, gate} |Σ_k P_out^k[i, j] θ_{k,1} + P_in^k[i, j] θ_{k,2}| as an (N, N) score over (target i, source j)."""
    cfg = params.config
    a = np.asarray(a_refined, dtype=np.float64)
    n = a.shape[0]
    p_out, p_in = transition_matrices(a)
    powers = np.empty((2, cfg.order + 1, n, n))
    for d, p in enumerate((p_out, p_in)):
        cur = np.eye(n)
        for k in range(cfg.order + 1):
            powers[d, k] = cur
            cur = p @ cur
    score = np.zeros((n, n))
    for cell in CELLS:
        for gate in GATES:
            theta = params.weights[f"{cell}_{gate}_theta"]
            if cfg.per_variable:
                # target i uses its own theta_i
                eff = np.einsum("dkij,idkfh->ijfh", powers, theta)
            else:
                eff = np.einsum("dkij,dkfh->ijfh", powers, theta)
            score = np.maximum(score, np.abs(eff).max(axis=(2, 3)))
    return score


def granger_interpret(params: ForecasterParams, a_refined, threshold: float) -> np.ndarray:
    """Boolean matrix G with G[j, i] = True iff source j's effective weight on target i exceeds ``threshold``."""
    return (effective_weights(params, a_refined) > threshold).T


def refined_adjacency(params: ForecasterParams, adjacency) -> np.ndarray:
    """Mean over timestamps of the deterministic refined graph used by the forecaster."""
    logits = np.asarray(adjacency) + (params.weights["delta"] if params.config.learn_structure else 0.0)
    return np.mean(_refine(logits, params.xi), axis=0)
