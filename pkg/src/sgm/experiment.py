"""Run configuration, pipeline stages and the cross-validated experiment harness."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import anomaly as an
from . import codec as cd
from . import dag_inner as di
from . import evaluation as ev
from . import granger_outer as go
from .data import CvGroup, EventLabels, TensorSeries, contiguous_runs, make_cv_groups, normalize

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Failure inside a named pipeline stage; ``cause`` keeps the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ configuration

@dataclass
class SynthConfig:
    n: int = 8
    d: int = 4
    t_len: int = 2000
    lag: int = 4
    sparsity: float = 0.8
    anomaly_rate: float = 0.005
    magnitude: float = 8.0
    seed: int = 0


@dataclass
class CodecConfig:
    h_dim: int = 16
    hidden: int = 32
    epochs: int = 300
    lr: float = 1e-2


@dataclass
class OuterConfig:
    hidden: int = 32
    order: int = 2
    lag: int = 24
    horizon: int = 24
    per_variable: bool = False
    learn_structure: bool = True
    xi0: float = 1.0
    xi_decay: float = 0.97
    xi_min: float = 0.1
    epochs: int = 40
    lr: float = 1e-2
    batch_size: int = 64
    alternate: bool = True
    alternate_every: int = 5
    max_alternations: int = 3
    refresh_steps: int = 50
    refresh_stages: int = 3
    granger_threshold: float = 0.1
    select_on_validation: bool = True  # checkpoint chosen by validation-split MAE


@dataclass
class AnomalyConfig:
    source: str = "forecast"          # "forecast" or "observation"
    quantile: float = 0.99


@dataclass
class EvalConfig:
    n_groups: int = 4
    group: int = 0                    # group used by the single-stage commands
    seeds: tuple = (1, 2, 3, 4)
    blend_steps: int = 21
    auc_mode: str = "pooled"          # "pooled" or "per_location"
    mae_scale: float = 1.0            # presentation factor only


@dataclass
class RunConfig:
    series: str = ""
    labels: str = ""
    out_dir: str = "run"
    synth: SynthConfig = field(default_factory=SynthConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    inner: di.InnerConfig = field(default_factory=di.InnerConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        ic = self.inner
        if ic.eta <= 1:
            raise ValueError("inner.eta must exceed 1")
        if not 0 < ic.gamma < 1:
            raise ValueError("inner.gamma must lie in (0, 1)")
        if ic.eps_acyc <= 0 or ic.lr <= 0 or ic.steps_per_stage < 1 or ic.max_stages < 1:
            raise ValueError("inner eps_acyc, lr, steps_per_stage and max_stages must be positive")
        oc = self.outer
        if oc.order < 0 or oc.lag < 1 or oc.horizon < 1 or oc.hidden < 1:
            raise ValueError("outer order >= 0, lag, horizon and hidden >= 1 required")
        if oc.xi0 <= 0 or oc.xi_min <= 0 or not 0 < oc.xi_decay <= 1:
            raise ValueError("Gumbel temperature schedule must stay positive")
        if self.codec.h_dim < 1 or self.codec.epochs < 0:
            raise ValueError("codec.h_dim >= 1 and codec.epochs >= 0 required")
        if self.anomaly.source not in ("forecast", "observation"):
            raise ValueError("anomaly.source must be 'forecast' or 'observation'")
        if not 0 < self.anomaly.quantile < 1:
            raise ValueError("anomaly.quantile must lie in (0, 1)")
        if self.eval.blend_steps < 2:
            raise ValueError("blend grid needs both endpoints (blend_steps >= 2)")
        if self.eval.auc_mode not in ("pooled", "per_location"):
            raise ValueError("eval.auc_mode must be 'pooled' or 'per_location'")
        if not self.eval.seeds:
            raise ValueError("eval.seeds must not be empty")
        if not 0 <= self.eval.group < self.eval.n_groups:
            raise ValueError("eval.group must index one of the CV groups")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["seeds"] = list(d["eval"]["seeds"])
        return d

    def hash(self) -> str:
        """Digest of every setting that affects results (paths excluded)."""
        d = self.to_dict()
        for k in ("series", "labels", "out_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (tuple, "tuple"):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if kind in ("int | None",):
        return None if raw.strip().lower() in ("", "none") else int(raw)
    return raw.strip()


def set_option(cfg: RunConfig, dotted: str, raw: str):
    """Assign ``section.key`` (or a top-level key) from its string form."""
    parts = dotted.split(".")
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p) or not is_dataclass(getattr(target, p)):
            raise ValueError(f"unknown config section {p!r}")
        target = getattr(target, p)
    key = parts[-1]
    types = {f.name: f.type for f in fields(target)}
    if key not in types:
        raise ValueError(f"unknown config key {dotted!r}")
    current = getattr(target, key)
    kind = types[key]
    if isinstance(kind, str):
        kind = {"bool": bool, "int": int, "float": float, "str": str, "tuple": tuple}.get(kind, kind)
    if isinstance(current, bool):
        kind = bool
    setattr(target, key, _coerce(kind, raw))


# ------------------------------------------------------------------ stages

def forecast_origins(index, lag: int, horizon: int, stride: int | None = None) -> np.ndarray:
    """Origins t (first forecast hour) with [t - max(lag, horizon), t + horizon) in one run of ``index``."""
    back = max(lag, horizon)
    stride = horizon if stride is None else stride
    out = []
    for a, b in contiguous_runs(np.asarray(index)):
        out.extend(range(a + back, b - horizon + 1, stride))
    return np.array(out, dtype=np.int64)


def train_codec(xn: np.ndarray, train_index, cfg: CodecConfig, seed: int) -> cd.CodecParams:
    rows = cd.series_rows(xn, train_index)
    return cd.codec_train(rows, h_dim=cfg.h_dim, epochs=cfg.epochs, lr=cfg.lr, seed=seed, hidden=cfg.hidden)


def hidden_sequence(params: cd.CodecParams, xn: np.ndarray) -> np.ndarray:
    """(N, D, T) -> latents (T, N, h_dim)."""
    return np.ascontiguousarray(cd.encode(params, xn.transpose(2, 0, 1)))


def discover(hidden: np.ndarray, cfg: di.InnerConfig, seed: int):
    icfg = di.InnerConfig(**{**asdict(cfg), "seed": seed})
    return di.fit_inner(hidden, icfg)


def forecaster_config(cfg: OuterConfig, n: int, in_dim: int, seed: int) -> go.ForecasterConfig:
    return go.ForecasterConfig(
        n_nodes=n, in_dim=in_dim, hidden=cfg.hidden, order=cfg.order, lag=cfg.lag, horizon=cfg.horizon,
        per_variable=cfg.per_variable, learn_structure=cfg.learn_structure, xi0=cfg.xi0,
        xi_decay=cfg.xi_decay, xi_min=cfg.xi_min, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
        seed=seed, alternate_every=cfg.alternate_every, max_alternations=cfg.max_alternations)


def train_forecaster(hidden, dags: di.DagSequence, sem: di.SemParams | None, train_index,
                     cfg: OuterConfig, inner: di.InnerConfig, seed: int, valid_index=None) -> go.OuterResult:
    fcfg = forecaster_config(cfg, hidden.shape[1], hidden.shape[2], seed)
    refresh = None
    if cfg.alternate and sem is not None:
        rcfg = di.InnerConfig(**{**asdict(inner), "seed": seed, "steps_per_stage": cfg.refresh_steps,
                                 "max_stages": cfg.refresh_stages})
        n = hidden.shape[1]
        off = ~np.eye(n, dtype=bool)

        def refresh(logits):
            # softmax rows are shift invariant: centre each row before handing it back
            centred = logits - (logits * off).sum(-1, keepdims=True) / (n - 1)
            init = centred if not rcfg.tied else centred.mean(axis=0)
            seq, _ = di.fit_inner(hidden, rcfg, init_adjacency=init, init_params=sem)
            return seq.adjacency

    return go.fit_outer(hidden, dags.adjacency, fcfg, train_index=train_index, refresh=refresh,
                        valid_index=valid_index if cfg.select_on_validation else None)


def forecast_hours(params: go.ForecasterParams, codec_params: cd.CodecParams, hidden, adjacency,
                   origins) -> tuple[np.ndarray, np.ndarray]:
    """Decoded forecasts (N, D, len(origins) * horizon) and the hour index of every column."""
    cfg = params.config
    starts = origins - cfg.lag
    pred = go.predict(params, hidden, adjacency, starts)              # (B, tau, N, F)
    dec = cd.decode(codec_params, pred)                               # (B, tau, N, D)
    hours = (origins[:, None] + np.arange(cfg.horizon)[None]).ravel()
    x = dec.reshape(-1, dec.shape[2], dec.shape[3]).transpose(1, 2, 0)
    return np.ascontiguousarray(x), hours


def persistence_hours(xn: np.ndarray, origins, horizon: int) -> np.ndarray:
    if len(origins) == 0:
        return np.zeros(xn.shape[:2] + (0,))
    return np.concatenate([ev.persistence_forecast(xn, int(t), horizon) for t in origins], axis=-1)


def auc_of(scores: np.ndarray, labels: np.ndarray, mode: str = "pooled") -> float | None:
    """Pooled AUC over all (location, hour) cells, or the mean of per-location AUCs."""
    if mode == "pooled":
        try:
            return ev.auc_roc(scores.ravel(), labels.ravel())
        except ev.MetricError:
            return None
    vals = []
    for s, l in zip(scores, labels):
        try:
            vals.append(ev.auc_roc(s, l))
        except ev.MetricError:
            continue
    return float(np.mean(vals)) if vals else None


@dataclass
class RunArtifacts:
    norm: object
    codec: cd.CodecParams
    dags: di.DagSequence
    sem: di.SemParams
    outer: go.OuterResult
    forecast: np.ndarray              # normalized decoded SGM forecasts on test hours (N, D, H)
    forecast_hours: np.ndarray
    scores: np.ndarray                # (N, H)
    score_hours: np.ndarray
    alpha: float
    curve: dict
    granger: np.ndarray
    metrics: dict


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:          # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, exc) from exc


def run_single(series: TensorSeries, labels: EventLabels | None, group: CvGroup, seed: int,
               cfg: RunConfig) -> RunArtifacts:
    """codec -> inner -> outer -> forecast -> anomaly -> metrics for one CV group and seed."""
    tr, va, te = group.train_index(), group.validation_index(), group.test_index()
    xs, norm = _stage("normalize", normalize, series, tr)
    xn = xs.values
    codec_params = _stage("codec", train_codec, xn, tr, cfg.codec, seed)
    hidden = hidden_sequence(codec_params, xn)
    dags, sem = _stage("inner", discover, hidden, cfg.inner, seed)
    outer = _stage("outer", train_forecaster, hidden, dags, sem, tr, cfg.outer, cfg.inner, seed, va)
    adj = outer.adjacency
    oc = cfg.outer

    def sgm_and_persistence(index):
        origins = forecast_origins(index, oc.lag, oc.horizon)
        if len(origins) == 0:
            raise ValueError("split too short for one forecast window")
        pred, hours = forecast_hours(outer.params, codec_params, hidden, adj, origins)
        return pred, persistence_hours(xn, origins, oc.horizon), xn[:, :, hours], hours

    val_pred, val_pers, val_true, _ = _stage("forecast", sgm_and_persistence, va)
    test_pred, test_pers, test_true, test_hours = _stage("forecast", sgm_and_persistence, te)
    alpha, curve = ev.blend_search(val_pred, val_pers, val_true, ev.default_grid(cfg.eval.blend_steps))
    metrics = {
        "mae_persistence": ev.mae(test_pers, test_true),
        "mae_sgm": ev.mae(test_pred, test_true),
        "mae_sgmpp": ev.mae(ev.sgm_plus_plus(test_pred, test_pers, alpha), test_true),
        "blend_alpha": alpha,
        "codec_mse": codec_params.final_mse,
        "inner_converged": bool(dags.converged),
        "inner_alpha_max": float(dags.alphas.max()),
        "outer_train_mae": float(min(h["mae"] for h in outer.history if "mae" in h)),
    }

    def anomaly_stage():
        if cfg.anomaly.source == "forecast":
            train_pred, train_hours = forecast_hours(outer.params, codec_params, hidden, adj,
                                                     forecast_origins(tr, oc.lag, oc.horizon))
            ref = an.score(train_pred, codec_params)
            return an.score(test_pred, codec_params), test_hours, ref
        return an.score(xn[:, :, te], codec_params), te, an.score(xn[:, :, tr], codec_params)

    scores, score_hours, ref_scores = _stage("anomaly", anomaly_stage)
    if labels is not None:
        lab = labels.values[:, score_hours]
        metrics["auc"] = auc_of(scores, lab, cfg.eval.auc_mode)
        flags = an.alert(scores, ref_scores, cfg.anomaly.quantile)
        metrics["alert_accuracy"] = ev.accuracy(flags, lab)
        per = ev.iou_per_class(flags, lab, (0, 1))
        metrics["alert_iou"] = per[1]
        metrics["alert_miou"] = per["mean"]
    ra = go.refined_adjacency(outer.params, adj)
    granger = go.granger_interpret(outer.params, ra, oc.granger_threshold)
    return RunArtifacts(norm, codec_params, dags, sem, outer, test_pred, test_hours, scores, score_hours,
                        alpha, curve, granger, metrics)


# ------------------------------------------------------------------ report

TABLE_ROWS = {
    "forecast": [("Persistence", "mae_persistence"), ("SGM", "mae_sgm"), ("SGM++", "mae_sgmpp")],
    "anomaly": [("SGM", "auc")],
}


@dataclass
class MetricsReport:
    config_hash: str
    runs: list[dict] = field(default_factory=list)   # {"group", "seed", "metrics"}

    def groups(self):
        return sorted({r["group"] for r in self.runs})

    def samples(self, metric: str, group: int) -> list[float]:
        return [r["metrics"][metric] for r in self.runs
                if r["group"] == group and r["metrics"].get(metric) is not None]

    def aggregate(self) -> dict:
        """metric -> group -> {mean, std, n, samples}; std is the population std over repeats."""
        names = sorted({k for r in self.runs for k, v in r["metrics"].items()
                        if isinstance(v, (int, float)) and not isinstance(v, bool)})
        out = {}
        for m in names:
            out[m] = {}
            for g in self.groups():
                s = self.samples(m, g)
                out[m][str(g)] = {"mean": float(np.mean(s)) if s else None,
                                  "std": float(np.std(s)) if s else None,
                                  "n": len(s), "samples": s}
        return out

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "runs": self.runs, "aggregate": self.aggregate()}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        doc = json.loads(Path(path).read_text())
        return cls(doc["config_hash"], doc["runs"])

    def table(self, kind: str = "forecast", scale: float = 1.0, digits: int = 3) -> str:
        """Aligned text table: rows = methods, columns = CV groups, cells = mean ± std."""
        groups = self.groups()
        header = ["Method"] + [f"Group {g + 1}" for g in groups]
        body = []
        for name, metric in TABLE_ROWS[kind]:
            row = [name]
            for g in groups:
                s = np.asarray(self.samples(metric, g), dtype=np.float64) * scale
                row.append("n/a" if s.size == 0 else f"{s.mean():.{digits}f} ± {s.std():.{digits}f}")
            body.append(row)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
        return "\n".join(lines)


def run_experiment(series: TensorSeries, labels: EventLabels | None, cfg: RunConfig,
                   on_run=None) -> MetricsReport:
    """All CV groups x repeat seeds; ``on_run(group, seed, artifacts)`` sees every run's outputs."""
    cfg.validate()
    if labels is not None:
        labels.check_aligned(series)
    groups = make_cv_groups(series, cfg.eval.n_groups)
    report = MetricsReport(cfg.hash())
    for g, group in enumerate(groups):
        for seed in cfg.eval.seeds:
            log.info("group %d seed %d", g, seed)
            art = run_single(series, labels, group, int(seed), cfg)
            report.runs.append({"group": g, "seed": int(seed), "metrics": art.metrics})
            if on_run is not None:
                on_run(g, int(seed), art)
    return report
