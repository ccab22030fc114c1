"""Command-line entry point: ``sgm <command> --config FILE [--set section.key=value ...]``.

Every command reads and writes declared artifacts under one run directory.
Failures print a JSON error object on stderr and exit with 2 (config),
3 (data / missing artifact) or 4 (numerical failure).
"""
from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import sys
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np

from . import anomaly as an
from . import codec as cd
from . import dag_inner as di
from . import evaluation as ev
from . import experiment as ex
from . import granger_outer as go
from . import synthetic as sy
from .data import (DataError, EventLabels, export_labels, export_series, ingest_labels, ingest_series,
                   load_norm, make_cv_groups, normalize, save_norm)
from .numerics import NumericsError

log = logging.getLogger("sgm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class MissingArtifactError(DataError):
    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = str(path)


def now() -> _dt.datetime:
    """Wall clock; tests replace this to simulate runs on different days."""
    return _dt.datetime.now(_dt.timezone.utc)


# ------------------------------------------------------------------ config

def load_config(path: str | None, overrides=()) -> ex.RunConfig:
    cfg = ex.RunConfig()
    try:
        if path:
            if not Path(path).is_file():
                raise ConfigError(f"config file not found: {path}")
            parser = configparser.ConfigParser()
            parser.read(path)
            for section in parser.sections():
                for key, raw in parser.items(section):
                    dotted = key if section == "data" else f"{section}.{key}"
                    ex.set_option(cfg, dotted, raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            ex.set_option(cfg, key[5:] if key.startswith("data.") else key, raw)
        cfg.validate()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _flatten(obj, prefix=""):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            out.update(_flatten(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = v
    return out


# ------------------------------------------------------------------ run directory helpers

class Run:
    def __init__(self, cfg: ex.RunConfig, run_dir: str | None):
        self.cfg = cfg
        self.hash = cfg.hash()
        base = run_dir or cfg.out_dir
        if not base:
            base = f"runs/run-{now().strftime('%Y%m%d-%H%M%S')}"
        self.dir = Path(base)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        return self.dir / name

    def need(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(p)
        return p

    def series_path(self) -> Path:
        if self.cfg.series:
            p = Path(self.cfg.series)
            if not p.exists():
                raise MissingArtifactError(p)
            return p
        return self.need("series.csv")

    def labels_path(self) -> Path | None:
        if self.cfg.labels:
            p = Path(self.cfg.labels)
            if not p.exists():
                raise MissingArtifactError(p)
            return p
        p = self.path("labels.csv")
        return p if p.exists() else None

    def load_data(self):
        series = ingest_series(self.series_path())
        lp = self.labels_path()
        labels = ingest_labels(lp, series) if lp else None
        return series, labels

    def group(self, series):
        return make_cv_groups(series, self.cfg.eval.n_groups)[self.cfg.eval.group]

    def seed(self):
        return int(self.cfg.eval.seeds[0])

    def write_json(self, name, doc):
        doc = dict(doc)
        doc.setdefault("config_hash", self.hash)
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def record(self, command, outputs):
        """Append a command entry to manifest.json (the only artifact carrying wall-clock time)."""
        mp = self.path("manifest.json")
        doc = json.loads(mp.read_text()) if mp.exists() else {"config_hash": self.hash, "commands": []}
        doc["config_hash"] = self.hash
        doc["config"] = self.cfg.to_dict()
        doc["commands"].append({"command": command, "at": now().isoformat(timespec="seconds"),
                                "outputs": sorted(outputs)})
        mp.write_text(json.dumps(doc, indent=2) + "\n")


def _normalized(run: Run, series):
    norm = load_norm(run.need("norm.json"))
    return norm.apply(series.values), norm


def _hidden(run: Run, xn):
    codec_params = cd.CodecParams.load(run.need("codec.json"))
    return codec_params, ex.hidden_sequence(codec_params, xn)


def _comment(run: Run):
    return f"config_hash={run.hash}"


# ------------------------------------------------------------------ commands

def cmd_synth(run: Run, args):
    sc = run.cfg.synth
    truth, series = sy.gen_var(sc.n, sc.d, sc.t_len, lag=sc.lag, sparsity=sc.sparsity, seed=sc.seed)
    labels = None
    if sc.anomaly_rate > 0:
        series, labels = sy.inject_anomalies(series, sc.anomaly_rate, sc.magnitude, seed=sc.seed + 1)
    export_series(series, run.path("series.csv"), comment=_comment(run))
    outputs = ["series.csv", "truth.json"]
    if labels is not None:
        export_labels(labels, run.path("labels.csv"), comment=_comment(run))
        outputs.append("labels.csv")
    run.write_json("truth.json", {"granger_coefficients": truth.granger.tolist(),
                                  "granger_edges": truth.granger_edges().tolist(),
                                  "noise_std": truth.noise_std})
    return outputs


def cmd_ingest(run: Run, args):
    series, labels = run.load_data()
    group = run.group(series)
    _, norm = normalize(series, group.train_index())
    save_norm(norm, series, run.path("norm.json"))
    doc = json.loads(run.path("norm.json").read_text())
    doc["config_hash"] = run.hash
    doc["shape"] = list(series.shape)
    doc["labels"] = None if labels is None else int(labels.values.sum())
    run.path("norm.json").write_text(json.dumps(doc, indent=2) + "\n")
    return ["norm.json"]


def cmd_train_codec(run: Run, args):
    series, _ = run.load_data()
    xn, _ = _normalized(run, series)
    params = ex.train_codec(xn, run.group(series).train_index(), run.cfg.codec, run.seed())
    doc = params.to_json()
    run.write_json("codec.json", doc)
    return ["codec.json"]


def cmd_discover(run: Run, args):
    series, _ = run.load_data()
    xn, _ = _normalized(run, series)
    _, hidden = _hidden(run, xn)
    seq, sem = ex.discover(hidden, run.cfg.inner, run.seed())
    di.export_dags(seq, run.path("dags"), run.hash, series.timestamps)
    run.write_json("dags/sem.json", sem.to_json())
    return ["dags/"]


def _load_forecaster(run: Run):
    doc = json.loads(run.need("forecaster.json").read_text())
    params = go.ForecasterParams.from_json(doc)
    adjacency = di.load_dags(run.need("dags_outer")).adjacency
    return params, adjacency


def cmd_train_forecaster(run: Run, args):
    series, _ = run.load_data()
    xn, _ = _normalized(run, series)
    _, hidden = _hidden(run, xn)
    dags = di.load_dags(run.need("dags"))
    sem = di.SemParams.from_json(json.loads(run.need("dags/sem.json").read_text()))
    group = run.group(series)
    result = ex.train_forecaster(hidden, dags, sem, group.train_index(), run.cfg.outer,
                                 run.cfg.inner, run.seed(), group.validation_index())
    run.write_json("forecaster.json", result.params.to_json())
    refined = di.DagSequence(result.adjacency, di.acyclicity(result.adjacency), dags.converged)
    di.export_dags(refined, run.path("dags_outer"), run.hash, series.timestamps)
    _write_granger(run, series, result.params, result.adjacency)
    return ["forecaster.json", "dags_outer/", "granger.csv"]


def _write_granger(run, series, params, adjacency):
    ra = go.refined_adjacency(params, adjacency)
    scores = go.effective_weights(params, ra)
    flags = go.granger_interpret(params, ra, run.cfg.outer.granger_threshold)
    with run.path("granger.csv").open("w") as fh:
        fh.write(f"# {_comment(run)}\n")
        fh.write("source,target,score,granger_cause\n")
        for j, src in enumerate(series.location_ids):
            for i, tgt in enumerate(series.location_ids):
                if i != j:
                    fh.write(f"{src},{tgt},{scores[i, j]!r},{int(flags[j, i])}\n")


def cmd_forecast(run: Run, args):
    series, _ = run.load_data()
    xn, norm = _normalized(run, series)
    codec_params, hidden = _hidden(run, xn)
    params, adjacency = _load_forecaster(run)
    oc = params.config
    group = run.group(series)
    out = {}
    for split, index in (("validation", group.validation_index()), ("test", group.test_index())):
        origins = ex.forecast_origins(index, oc.lag, oc.horizon)
        if len(origins) == 0:
            raise DataError(f"{split} split too short for one forecast window")
        pred, hours = ex.forecast_hours(params, codec_params, hidden, adjacency, origins)
        out[split] = (pred, hours, ex.persistence_hours(xn, origins, oc.horizon))
    vpred, vhours, vpers = out["validation"]
    alpha, curve = ev.blend_search(vpred, vpers, xn[:, :, vhours], ev.default_grid(run.cfg.eval.blend_steps))
    tpred, thours, _ = out["test"]
    export_series(series, run.path("forecast.csv"), values=norm.invert(tpred),
                  timestamps=series.timestamps[thours], comment=_comment(run))
    run.write_json("blend.json", {"alpha": alpha, "curve": {repr(k): v for k, v in curve.items()},
                                  "horizon": oc.horizon, "lag": oc.lag})
    return ["forecast.csv", "blend.json"]


def _forecast_columns(run, series, norm):
    fc = ingest_series(run.need("forecast.csv"))
    if fc.location_ids != series.location_ids or fc.feature_names != series.feature_names:
        raise DataError("forecast.csv does not match the series locations/features")
    pos = {int(t): k for k, t in enumerate(series.timestamps)}
    try:
        hours = np.array([pos[int(t)] for t in fc.timestamps])
    except KeyError as exc:
        raise DataError(f"forecast hour {exc} is outside the series") from exc
    return norm.apply(fc.values), hours


def cmd_detect(run: Run, args):
    series, labels = run.load_data()
    xn, norm = _normalized(run, series)
    codec_params = cd.CodecParams.load(run.need("codec.json"))
    group = run.group(series)
    ac = run.cfg.anomaly
    if ac.source == "forecast":
        x, hours = _forecast_columns(run, series, norm)
        params, adjacency = _load_forecaster(run)
        hidden = ex.hidden_sequence(codec_params, xn)
        ref_x, _ = ex.forecast_hours(params, codec_params, hidden, adjacency,
                                     ex.forecast_origins(group.train_index(), params.config.lag,
                                                         params.config.horizon))
    else:
        hours = group.test_index()
        x = xn[:, :, hours]
        ref_x = xn[:, :, group.train_index()]
    scores = an.AnomalyScores(an.score(x, codec_params), list(series.location_ids),
                              series.timestamps[hours], ac.source)
    an.export_scores(scores, run.path("scores.csv"), series.time_format,
                     None if labels is None else labels.values[:, hours], comment=_comment(run))
    ref = an.score(ref_x, codec_params)
    run.write_json("alert.json", {"quantile": ac.quantile, "threshold": an.alert_threshold(ref, ac.quantile),
                                  "source": ac.source})
    return ["scores.csv", "alert.json"]


def single_metrics(run: Run) -> dict:
    series, labels = run.load_data()
    xn, norm = _normalized(run, series)
    pred, hours = _forecast_columns(run, series, norm)
    blend = json.loads(run.need("blend.json").read_text())
    scores_path = run.need("scores.csv")
    horizon = blend["horizon"]
    origins = hours[::horizon]
    pers = ex.persistence_hours(xn, origins, horizon)
    truth = xn[:, :, hours]
    metrics = {
        "mae_persistence": ev.mae(pers, truth),
        "mae_sgm": ev.mae(pred, truth),
        "mae_sgmpp": ev.mae(ev.sgm_plus_plus(pred, pers, blend["alpha"]), truth),
        "blend_alpha": blend["alpha"],
    }
    _, _, scores, labs = an.read_scores(scores_path)
    if labels is not None and np.all(labs >= 0):
        metrics["auc"] = ex.auc_of(scores, labs, run.cfg.eval.auc_mode)
        threshold = json.loads(run.need("alert.json").read_text())["threshold"]
        flags = (scores > threshold).astype(int)
        metrics["alert_accuracy"] = ev.accuracy(flags, labs)
        per = ev.iou_per_class(flags, labs, (0, 1))
        metrics["alert_iou"], metrics["alert_miou"] = per[1], per["mean"]
    return metrics


def cmd_eval(run: Run, args):
    metrics = single_metrics(run)
    report = ex.MetricsReport(run.hash, [{"group": run.cfg.eval.group, "seed": run.seed(), "metrics": metrics}])
    report.save(run.path("metrics.json"))
    print(report.table("forecast", run.cfg.eval.mae_scale))
    return ["metrics.json"]


def write_run_artifacts(run_dir: Path, art: ex.RunArtifacts, series, labels, cfg: ex.RunConfig, chash: str):
    """Persist one pipeline run in the fixed layout."""
    run_dir.mkdir(parents=True, exist_ok=True)
    comment = f"config_hash={chash}"

    def dump(name, doc):
        doc = dict(doc, config_hash=chash)
        (run_dir / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    dump("norm.json", art.norm.to_json(series.location_ids, series.feature_names))
    dump("codec.json", art.codec.to_json())
    di.export_dags(art.dags, run_dir / "dags", chash, series.timestamps)
    dump("forecaster.json", art.outer.params.to_json())
    export_series(series, run_dir / "forecast.csv", values=art.norm.invert(art.forecast),
                  timestamps=series.timestamps[art.forecast_hours], comment=comment)
    scores = an.AnomalyScores(art.scores, list(series.location_ids), series.timestamps[art.score_hours],
                              cfg.anomaly.source)
    an.export_scores(scores, run_dir / "scores.csv", series.time_format,
                     None if labels is None else labels.values[:, art.score_hours], comment=comment)
    dump("blend.json", {"alpha": art.alpha, "curve": {repr(k): v for k, v in art.curve.items()}})
    with (run_dir / "granger.csv").open("w") as fh:
        fh.write(f"# {comment}\nsource,target,granger_cause\n")
        for j, src in enumerate(series.location_ids):
            for i, tgt in enumerate(series.location_ids):
                if i != j:
                    fh.write(f"{src},{tgt},{int(art.granger[j, i])}\n")
    dump("metrics.json", {"metrics": art.metrics})


def cmd_pipeline(run: Run, args):
    series, labels = run.load_data()
    cfg = run.cfg

    def on_run(g, seed, art):
        write_run_artifacts(run.path(f"runs/g{g}_s{seed}"), art, series, labels, cfg, run.hash)

    report = ex.run_experiment(series, labels, cfg, on_run=on_run if not args.no_artifacts else None)
    report.save(run.path("metrics.json"))
    text = ("Forecasting error (MAE)\n" + report.table("forecast", cfg.eval.mae_scale)
            + "\n\nAnomaly detection (AUC-ROC)\n" + report.table("anomaly") + "\n")
    run.path("report.txt").write_text(f"# config_hash={run.hash}\n" + text)
    print(text)
    return ["metrics.json", "report.txt", "runs/"]


def cmd_dag_diff(args):
    a, b = di.read_matrix(args.a), di.read_matrix(args.b)
    print(json.dumps({"differing_cells": di.count_diff_cells(a, b, args.atol), "total_cells": int(a.size)}))


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-codec": cmd_train_codec,
    "discover": cmd_discover,
    "train-forecaster": cmd_train_forecaster,
    "forecast": cmd_forecast,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgm", description="Causal-DAG discovery, Granger forecasting and anomaly scoring")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--run-dir", help="run directory (overrides data.out_dir)")
        if name == "pipeline":
            sp.add_argument("--no-artifacts", action="store_true", help="write only the aggregated report")
    dd = sub.add_parser("dag-diff", help="count differing cells between two exported adjacency CSVs")
    dd.add_argument("a")
    dd.add_argument("b")
    dd.add_argument("--atol", type=float, default=0.0)
    return p


def _fail(code: int, kind: str, exc: Exception, stage: str | None = None) -> int:
    doc = {"error": kind, "message": str(exc)}
    if stage:
        doc["stage"] = stage
    if isinstance(exc, MissingArtifactError):
        doc["path"] = exc.path
    print(json.dumps(doc), file=sys.stderr)
    return code


def _classify(exc: Exception, stage=None) -> int:
    if isinstance(exc, ex.StageError):
        return _classify(exc.cause, exc.stage)
    if isinstance(exc, ConfigError):
        return _fail(EXIT_CONFIG, "config_error", exc, stage)
    if isinstance(exc, MissingArtifactError):
        return _fail(EXIT_DATA, "missing_artifact", exc, stage)
    if isinstance(exc, (DataError, FileNotFoundError)):
        return _fail(EXIT_DATA, "data_error", exc, stage)
    if isinstance(exc, (NumericsError, np.linalg.LinAlgError, FloatingPointError)):
        return _fail(EXIT_NUMERIC, "numerical_failure", exc, stage)
    if isinstance(exc, ValueError):
        return _fail(EXIT_DATA, "data_error", exc, stage)
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "dag-diff":
        try:
            cmd_dag_diff(args)
        except (OSError, ValueError) as exc:
            return _fail(EXIT_DATA, "data_error", exc)
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.set)
        run = Run(cfg, args.run_dir)
        outputs = COMMANDS[args.command](run, args)
        run.record(args.command, outputs)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        return _classify(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
