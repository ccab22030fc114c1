import json

import numpy as np
import pytest

from sgm import experiment as ex
from sgm.synthetic import gen_var, inject_anomalies


# ---------------------------------------------------------------- config

def test_set_option_coerces_types():
    cfg = ex.RunConfig()
    ex.set_option(cfg, "inner.eta", "5")
    ex.set_option(cfg, "outer.per_variable", "yes")
    ex.set_option(cfg, "eval.seeds", "7, 8 9")
    ex.set_option(cfg, "codec.h_dim", "4")
    ex.set_option(cfg, "inner.hidden", "none")
    ex.set_option(cfg, "series", "x.csv")
    assert cfg.inner.eta == 5.0 and cfg.outer.per_variable is True
    assert cfg.eval.seeds == (7, 8, 9) and cfg.codec.h_dim == 4
    assert cfg.inner.hidden is None and cfg.series == "x.csv"


@pytest.mark.parametrize("key,raw", [("nope.x", "1"), ("inner.nope", "1"), ("codec.h_dim", "abc"),
                                     ("outer.alternate", "maybe")])
def test_set_option_rejects(key, raw):
    with pytest.raises(ValueError):
        ex.set_option(ex.RunConfig(), key, raw)


@pytest.mark.parametrize("key,raw", [("inner.eta", "1.0"), ("inner.gamma", "1.5"), ("anomaly.quantile", "1"),
                                     ("anomaly.source", "both"), ("eval.blend_steps", "1"),
                                     ("outer.xi0", "0"), ("eval.group", "9"), ("eval.auc_mode", "mean")])
def test_validate_rejects_out_of_range(key, raw):
    cfg = ex.RunConfig()
    ex.set_option(cfg, key, raw)
    with pytest.raises(ValueError):
        cfg.validate()


def test_hash_ignores_paths_only():
    a, b = ex.RunConfig(), ex.RunConfig()
    b.out_dir, b.series = "elsewhere", "other.csv"
    assert a.hash() == b.hash() and len(a.hash()) == 16
    b.outer.lag = 5
    assert a.hash() != b.hash()


def test_to_dict_is_json_serializable():
    json.dumps(ex.RunConfig().to_dict())


# ---------------------------------------------------------------- stages

def test_forecast_origins_inside_runs():
    idx = np.r_[0:20, 40:50]
    origins = ex.forecast_origins(idx, lag=4, horizon=3)
    np.testing.assert_array_equal(origins, [4, 7, 10, 13, 16, 44, 47])


def test_auc_modes():
    scores = np.array([[0.1, 0.9, 0.2], [0.8, 0.3, 0.1]])
    labels = np.array([[0, 1, 0], [0, 1, 0]])
    assert ex.auc_of(scores, labels, "per_location") == pytest.approx((1.0 + 0.5) / 2)
    assert ex.auc_of(np.zeros((1, 3)), np.zeros((1, 3), dtype=int)) is None


def test_pooled_auc_pairwise():
    scores = np.array([[0.1, 0.9, 0.2], [0.8, 0.3, 0.1]])
    labels = np.array([[0, 1, 0], [0, 1, 0]])
    pos, neg = scores[labels == 1], scores[labels == 0]
    oracle = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
    assert ex.auc_of(scores, labels) == pytest.approx(oracle, abs=1e-12)


def test_persistence_hours_layout():
    xn = np.arange(2 * 1 * 12, dtype=float).reshape(2, 1, 12)
    got = ex.persistence_hours(xn, np.array([4, 8]), 4)
    np.testing.assert_array_equal(got, xn[:, :, [0, 1, 2, 3, 4, 5, 6, 7]])


def tiny_cfg():
    cfg = ex.RunConfig()
    for k, v in [("codec.h_dim", "4"), ("codec.epochs", "20"), ("inner.steps_per_stage", "5"),
                 ("inner.max_stages", "2"), ("inner.lr", "1e-2"), ("outer.lag", "4"), ("outer.horizon", "4"),
                 ("outer.epochs", "2"), ("outer.hidden", "8"), ("outer.refresh_steps", "3"),
                 ("outer.refresh_stages", "1"), ("outer.alternate_every", "1"), ("outer.max_alternations", "1"),
                 ("eval.n_groups", "2"), ("eval.seeds", "1 2")]:
        ex.set_option(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_data():
    _, s = gen_var(4, 2, 200, seed=0)
    return inject_anomalies(s, 0.02, 8.0, seed=1)


def test_experiment_report_counts_and_table(tiny_data):
    series, labels = tiny_data
    seen = []
    report = ex.run_experiment(series, labels, tiny_cfg(), on_run=lambda g, s, art: seen.append((g, s)))
    assert seen == [(0, 1), (0, 2), (1, 1), (1, 2)]
    agg = report.aggregate()
    for g in ("0", "1"):
        cell = agg["mae_sgm"][g]
        assert cell["n"] == 2 and len(cell["samples"]) == 2
        assert cell["mean"] == pytest.approx(np.mean(cell["samples"]))
        assert cell["std"] == pytest.approx(np.std(cell["samples"]))
    for r in report.runs:
        m = r["metrics"]
        assert m["mae_sgmpp"] <= max(m["mae_sgm"], m["mae_persistence"]) + 1e-12
        assert 0 <= m["auc"] <= 1 and 0 <= m["alert_accuracy"] <= 1
    lines = report.table("forecast").splitlines()
    assert lines[0].split() == ["Method", "Group", "1", "Group", "2"]
    assert [l.split()[0] for l in lines[2:]] == ["Persistence", "SGM", "SGM++"]
    assert all(l.count("±") == 2 for l in lines[2:])
    assert report.table("anomaly").splitlines()[2].startswith("SGM")


def test_experiment_repeats_bit_identical(tiny_data, tmp_path):
    series, labels = tiny_data
    cfg = tiny_cfg()
    ex.set_option(cfg, "eval.n_groups", "2")
    ex.set_option(cfg, "eval.seeds", "3")
    ex.run_experiment(series, labels, cfg).save(tmp_path / "a.json")
    ex.run_experiment(series, labels, cfg).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = ex.MetricsReport.load(tmp_path / "a.json")
    assert back.config_hash == cfg.hash() and len(back.runs) == 2


def test_report_four_repeats():
    runs = [{"group": 0, "seed": s, "metrics": {"auc": v}} for s, v in zip((1, 2, 3, 4), (0.8, 0.9, 0.7, 1.0))]
    rep = ex.MetricsReport("h", runs)
    cell = rep.aggregate()["auc"]["0"]
    assert cell["n"] == 4 and cell["mean"] == pytest.approx(0.85)
    assert cell["std"] == pytest.approx(np.std([0.8, 0.9, 0.7, 1.0]))
    assert "0.850 ± 0.112" in rep.table("anomaly")


def test_stage_error_names_stage(tiny_data):
    series, labels = tiny_data
    cfg = tiny_cfg()
    ex.set_option(cfg, "outer.lag", "150")          # longer than any split
    with pytest.raises(ex.StageError) as info:
        ex.run_experiment(series, labels, cfg)
    assert info.value.stage == "outer"
