"""Per-timestamp DAG discovery on latent features.

Each timestamp t carries a latent matrix H_t (N x F, rows are locations).  The
structural model encodes ``Z = (I - Aᵀ) f_enc(H)`` and decodes
``H = f_dec((I - Aᵀ)⁻¹ Z)``; A is fitted by minimizing the negative ELBO plus
an augmented-Lagrangian penalty on the acyclicity score
``α(A) = Tr[(I + A∘A)^N] - N``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import numerics as nx

log = logging.getLogger(__name__)

MAGNITUDE_LIMIT = 1e200
MAX_NODES = 30
LOG_2PI = float(np.log(2.0 * np.pi))


class AcyclicityOverflowError(nx.NumericsError):
    pass


class InnerDivergenceError(nx.NumericsError):
    pass


# ------------------------------------------------------------------ acyclicity

def acyclicity(a) -> float | np.ndarray:
    """α(A) = Tr[(I + A∘A)^N] - N; an (N, N) input gives a float, a stack an array."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("acyclicity needs square matrices")
    n = a.shape[-1]
    if a.ndim == 2:
        m = np.eye(n) + a * a
        val = _kernels.trace_power(m, n)
        if not np.isfinite(val) or abs(val) > MAGNITUDE_LIMIT:
            raise AcyclicityOverflowError(f"trace power overflow ({val:.3g})")
        return val - n
    return np.array([acyclicity(x) for x in a.reshape((-1, n, n))]).reshape(a.shape[:-2])


def acyclicity_node(a):
    """Differentiable α on the tape; batched over leading axes (returns per-matrix values)."""
    va = a.value if isinstance(a, nx.Node) else np.asarray(a)
    n = va.shape[-1]
    m = nx.add(nx.mul(a, a), np.eye(n))
    result = None
    base = m
    e = n
    while e > 0:
        if e & 1:
            result = base if result is None else nx.matmul(result, base)
        e >>= 1
        if e:
            base = nx.matmul(base, base)
    peak = float(np.max(np.abs(result.value if isinstance(result, nx.Node) else result)))
    if not np.isfinite(peak) or peak > MAGNITUDE_LIMIT:
        raise AcyclicityOverflowError(f"trace power overflow ({peak:.3g})")
    return nx.sub(nx.trace(result), float(n))


# ------------------------------------------------------------------ SEM networks

SEM_KEYS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2", "logvar")


@dataclass
class SemParams:
    """Two-layer ReLU MLPs for f_enc / f_dec and a per-dimension posterior log-variance.

    With ``per_timestamp`` every weight carries a leading T axis.
    """
    weights: dict[str, np.ndarray]
    per_timestamp: bool = False

    @property
    def width(self):
        return self.weights["enc_w1"].shape[-2]

    def copy(self):
        return SemParams({k: v.copy() for k, v in self.weights.items()}, self.per_timestamp)

    def to_json(self):
        return {"per_timestamp": self.per_timestamp,
                "shapes": {k: list(v.shape) for k, v in self.weights.items()},
                "values": {k: v.ravel().tolist() for k, v in self.weights.items()}}

    @classmethod
    def from_json(cls, doc):
        w = {k: np.array(doc["values"][k], dtype=np.float64).reshape(doc["shapes"][k]) for k in SEM_KEYS}
        return cls(w, doc["per_timestamp"])


def identity_sem(width: int, hidden: int | None = None, t_len: int | None = None,
                 noise: float = 0.0, seed: int = 0) -> SemParams:
    """MLPs computing relu(x) - relu(-x) = x exactly, optionally perturbed."""
    hidden = 2 * width if hidden is None else hidden
    if hidden < 2 * width:
        raise ValueError("identity nets need hidden >= 2 * width")
    rng = np.random.default_rng(seed)
    w1 = np.zeros((width, hidden))
    w1[:, :width] = np.eye(width)
    w1[:, width:2 * width] = -np.eye(width)
    w2 = w1.T.copy()
    base = {
        "enc_w1": w1, "enc_b1": np.zeros(hidden), "enc_w2": w2, "enc_b2": np.zeros(width),
        "dec_w1": w1.copy(), "dec_b1": np.zeros(hidden), "dec_w2": w2.copy(), "dec_b2": np.zeros(width),
        "logvar": np.zeros(width),
    }
    if noise:
        base = {k: v + noise * rng.standard_normal(v.shape) if k != "logvar" else v for k, v in base.items()}
    if t_len is not None:
        base = {k: np.repeat(v[None], t_len, axis=0) for k, v in base.items()}
    return SemParams(base, t_len is not None)


def _expand_bias(b, per_timestamp):
    # (T, k) biases broadcast against (T, N, k) activations
    return nx.expand_dims(b, -2) if per_timestamp else b


def _mlp(w, prefix, x, per_timestamp):
    b1 = _expand_bias(w[prefix + "_b1"], per_timestamp)
    b2 = _expand_bias(w[prefix + "_b2"], per_timestamp)
    hidden = nx.relu(nx.add(nx.matmul(x, w[prefix + "_w1"]), b1))
    return nx.add(nx.matmul(hidden, w[prefix + "_w2"]), b2)


def _check_shapes(h, a):
    vh = h.value if isinstance(h, nx.Node) else np.asarray(h)
    va = a.value if isinstance(a, nx.Node) else np.asarray(a)
    if va.shape[-1] != va.shape[-2]:
        raise ValueError(f"adjacency must be square, got {va.shape}")
    if vh.shape[-2] != va.shape[-1]:
        raise ValueError(f"H has {vh.shape[-2]} rows but A is {va.shape[-1]} x {va.shape[-1]}")


def _i_minus_at(a):
    va = a.value if isinstance(a, nx.Node) else np.asarray(a)
    return nx.sub(np.eye(va.shape[-1]), nx.transpose(a))


def sem_encode(h, a, params: SemParams | dict, per_timestamp=None):
    """Z = (I - Aᵀ) f_enc(H)."""
    w, per_t = _unpack(params, per_timestamp)
    _check_shapes(h, a)
    return nx.matmul(_i_minus_at(a), _mlp(w, "enc", h, per_t))


def sem_decode(z, a, params: SemParams | dict, per_timestamp=None):
    """H̄ = f_dec((I - Aᵀ)⁻¹ Z); raises SingularMatrixError when I - Aᵀ is near singular."""
    w, per_t = _unpack(params, per_timestamp)
    _check_shapes(z, a)
    return _mlp(w, "dec", nx.linsolve(_i_minus_at(a), z), per_t)


def _unpack(params, per_timestamp):
    if isinstance(params, SemParams):
        return params.weights, params.per_timestamp
    return params, bool(per_timestamp)


def elbo_terms(h, a, params, eps=None, per_timestamp=None):
    """(KL, reconstruction NLL) summed over all cells, as tape nodes or floats.

    The posterior is N(sem_encode(H), diag(exp(logvar))); the likelihood is a
    unit-variance Gaussian, so the NLL is ½‖H - H̄‖² plus ½·log 2π per cell.
    ``eps`` is the reparameterization noise (zeros when omitted).
    """
    w, per_t = _unpack(params, per_timestamp)
    mu = sem_encode(h, a, w, per_t)
    lv = w["logvar"]
    if per_t:
        lv = _expand_bias(lv, True)
    kl = nx.mul(0.5, nx.sum_(nx.sub(nx.add(nx.exp(lv), nx.square(mu)), nx.add(lv, 1.0))))
    if eps is None:
        z = mu
    else:
        z = nx.add(mu, nx.mul(nx.exp(nx.mul(0.5, lv)), eps))
    h_bar = sem_decode(z, a, w, per_t)
    cells = np.asarray(h.value if isinstance(h, nx.Node) else h).size
    nll = nx.add(nx.mul(0.5, nx.sum_(nx.square(nx.sub(h, h_bar)))), 0.5 * cells * LOG_2PI)
    return kl, nll


def elbo_loss(h, a, params, eps=None, per_timestamp=None):
    """Negative ELBO: KL(Q(Z|H) ‖ N(0, I)) - E_Q[log P(H|Z)]."""
    kl, nll = elbo_terms(h, a, params, eps, per_timestamp)
    loss = nx.add(kl, nll)
    value = loss.value if isinstance(loss, nx.Node) else loss
    if not np.all(np.isfinite(value)):
        raise InnerDivergenceError("non-finite ELBO")
    return loss


def _mask_diag(a):
    va = a.value if isinstance(a, nx.Node) else np.asarray(a)
    return nx.mul(a, 1.0 - np.eye(va.shape[-1]))


def inner_objective(h, a, params, lam, c, eps=None, per_timestamp=None, tied=None):
    """Full augmented-Lagrangian objective for a stack of timestamps.

    ``h`` is (T, N, F).  ``a`` is (N, N) when tied (one graph, T treated as
    samples) or (T, N, N).  Data terms are averaged over T; the penalty uses
    the mean acyclicity ``h̄`` (or per-timestamp α with vector ``lam``/``c``):
    ``loss + λ·h̄ + c/2·h̄²``.  Returns ``(objective, alphas)``.
    """
    va = a.value if isinstance(a, nx.Node) else np.asarray(a)
    t_len = (h.value if isinstance(h, nx.Node) else np.asarray(h)).shape[0]
    a_m = _mask_diag(a)
    loss = nx.mul(elbo_loss(h, a_m, params, eps, per_timestamp), 1.0 / t_len)
    alphas = acyclicity_node(a_m)
    lam = np.asarray(lam, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if lam.ndim == 0 or va.ndim == 2:
        h_bar = nx.mean(alphas) if va.ndim == 3 else alphas
        penalty = nx.add(nx.mul(lam, h_bar), nx.mul(0.5 * c, nx.square(h_bar)))
    else:
        penalty = nx.mul(nx.sum_(nx.add(nx.mul(lam, alphas), nx.mul(0.5 * c, nx.square(alphas)))), 1.0 / t_len)
    return nx.add(loss, penalty), alphas


# ------------------------------------------------------------------ schedule / results

@dataclass
class AugLagState:
    lam: float | np.ndarray = 0.0
    c: float | np.ndarray = 1.0
    eta: float = 10.0
    gamma: float = 0.25
    alpha_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.eta <= 1.0:
            raise ValueError("eta must exceed 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def update(self, alpha):
        """λ ← λ + c·α, then c ← η·c where |α| > γ·|α_prev| (α_prev = ∞ on the first stage)."""
        alpha = np.asarray(alpha, dtype=np.float64)
        prev = self.alpha_history[-1] if self.alpha_history else np.full_like(alpha, np.inf)
        c = np.asarray(self.c, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64) + c * alpha
        self.c = np.where(np.abs(alpha) > self.gamma * np.abs(prev), self.eta * c, c)
        self.alpha_history.append(alpha)
        if self.lam.ndim == 0:
            self.lam, self.c = float(self.lam), float(self.c)


@dataclass
class InnerConfig:
    lam0: float = 0.0
    c0: float = 1.0
    eta: float = 10.0
    gamma: float = 0.25
    eps_acyc: float = 1e-6
    lr: float = 1e-3
    steps_per_stage: int = 300
    max_stages: int = 20
    seed: int = 0
    tied: bool = False               # one graph for all T slices (slices are iid samples)
    per_timestamp_networks: bool = False
    shared_multipliers: bool = True
    sample_posterior: bool = True
    hidden: int | None = None
    init_noise: float = 0.01


@dataclass
class DagSequence:
    adjacency: np.ndarray            # (T, N, N)
    alphas: np.ndarray               # (T,)
    converged: bool = True
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if self.adjacency.ndim == 2:
            self.adjacency = self.adjacency[None]
        if self.adjacency.shape[-1] != self.adjacency.shape[-2]:
            raise ValueError("adjacency matrices must be square")
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.adjacency.shape[0]

    def recompute_alphas(self):
        return np.asarray(acyclicity(self.adjacency)).reshape(-1)


def fit_inner(hidden, config: InnerConfig | None = None, init_adjacency=None,
              init_params: SemParams | None = None) -> tuple[DagSequence, SemParams]:
    """Learn A (tied) or A^(t) (untied) from latents ``hidden`` of shape (T, N, F).

    Runs up to ``max_stages`` augmented-Lagrangian stages of
    ``steps_per_stage`` Adam steps each, stopping once every α ≤ eps_acyc.
    A run that exhausts its stages is returned with ``converged=False``.
    """
    cfg = config or InnerConfig()
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 3 or h.shape[0] < 1:
        raise ValueError("hidden must have shape (T, N, F) with T >= 1")
    t_len, n, width = h.shape
    if n > MAX_NODES:
        raise ValueError(f"at most {MAX_NODES} nodes supported, got {n}")
    rng = np.random.default_rng(cfg.seed)
    a_shape = (n, n) if cfg.tied else (t_len, n, n)
    a = np.zeros(a_shape) if init_adjacency is None else np.array(np.broadcast_to(init_adjacency, a_shape))
    a *= 1.0 - np.eye(n)
    if init_params is not None:
        sem = init_params.copy()
    else:
        per_t = cfg.per_timestamp_networks and not cfg.tied
        sem = identity_sem(width, cfg.hidden, t_len if per_t else None, cfg.init_noise, cfg.seed)
    params = dict(sem.weights, A=a)
    opt = nx.Adam(params, lr=cfg.lr)
    multiplier_shape = () if (cfg.shared_multipliers or cfg.tied) else (t_len,)
    state = AugLagState(np.full(multiplier_shape, cfg.lam0) if multiplier_shape else cfg.lam0,
                        np.full(multiplier_shape, cfg.c0) if multiplier_shape else cfg.c0,
                        cfg.eta, cfg.gamma)
    trace = []
    converged = False
    for stage in range(cfg.max_stages):
        lam, c = state.lam, state.c
        for _ in range(cfg.steps_per_stage):
            tape = nx.Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            eps = rng.standard_normal(h.shape) if cfg.sample_posterior else None
            sem_w = {k: leaves[k] for k in SEM_KEYS}
            obj, _ = inner_objective(h, leaves["A"], sem_w, lam, c, eps, sem.per_timestamp)
            if not np.isfinite(obj.value):
                raise InnerDivergenceError(f"inner objective diverged at stage {stage}")
            grads = nx.grad(obj, list(leaves.values()))
            opt.step(dict(zip(leaves.keys(), grads)))
            params["A"] *= 1.0 - np.eye(n)
        alphas = np.atleast_1d(acyclicity(params["A"]))
        agg = float(alphas.mean()) if multiplier_shape == () else alphas
        entry = {"stage": stage, "lam": _plain(lam), "c": _plain(c),
                 "alpha": _plain(agg), "alpha_max": float(alphas.max())}
        trace.append(entry)
        log.debug("inner stage %d: alpha_max=%.3e lam=%s c=%s", stage, alphas.max(), entry["lam"], entry["c"])
        if alphas.max() <= cfg.eps_acyc:
            converged = True
            break
        state.update(agg)
    final_a = params["A"] * (1.0 - np.eye(n))
    adj = np.broadcast_to(final_a, (t_len, n, n)).copy()
    alphas = np.asarray(acyclicity(adj)).reshape(-1)
    if not converged:
        log.warning("inner optimization stopped after %d stages with max alpha %.3e",
                    cfg.max_stages, alphas.max())
    sem_out = SemParams({k: params[k].copy() for k in SEM_KEYS}, sem.per_timestamp)
    return DagSequence(adj, alphas, converged, trace), sem_out


def _plain(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x.tolist()


# ------------------------------------------------------------------ export

def export_dags(seq: DagSequence, run_dir, config_hash: str | None = None, timestamps=None):
    """One CSV matrix per timestamp under ``run_dir`` plus ``manifest.json``."""
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, mat in enumerate(seq.adjacency):
        name = f"dag_{k:05d}.csv"
        with (out / name).open("w") as fh:
            for row in mat:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        files.append(name)
    manifest = {
        "config_hash": config_hash,
        "n_nodes": int(seq.adjacency.shape[-1]),
        "files": files,
        "timestamps": None if timestamps is None else [int(t) for t in timestamps],
        "alphas": seq.alphas.tolist(),
        "converged": bool(seq.converged),
        "schedule_trace": seq.trace,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def read_matrix(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def load_dags(run_dir) -> DagSequence:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    mats = np.stack([read_matrix(run_dir / f) for f in manifest["files"]])
    return DagSequence(mats, manifest["alphas"], manifest["converged"], manifest["schedule_trace"])


def count_diff_cells(a, b, atol: float = 0.0) -> int:
    """Number of cells where two adjacency matrices differ by more than ``atol``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return _kernels.count_diff(a, b, atol)
