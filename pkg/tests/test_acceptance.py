"""End-to-end acceptance checks; one test per criterion, summarized as PASS/FAIL lines by conftest."""
import datetime as dt
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from sgm import cli
from sgm import codec as cd
from sgm import dag_inner as di
from sgm import evaluation as ev
from sgm import experiment as ex
from sgm import granger_outer as go
from sgm import numerics as nx
from sgm import synthetic as sy
from sgm.data import make_cv_groups

pytestmark = pytest.mark.acceptance

TINY = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.ini")


def tape_vs_fd(loss, weights, key, step=1e-6):
    tape = nx.Tape()
    leaves = {k: tape.leaf(v) for k, v in weights.items()}
    (g,) = nx.grad(loss(leaves), [leaves[key]])
    num = nx.finite_difference(lambda w: float(loss(dict(weights, **{key: w}))), weights[key], step)
    return nx.rel_error(g, num)


def has_cycle(a):
    """Depth-first search for a directed cycle in the support of ``a`` (self-loops count)."""
    n = a.shape[0]
    state = [0] * n

    def visit(u):
        state[u] = 1
        for v in range(n):
            if a[u, v] != 0:
                if state[v] == 1 or (state[v] == 0 and visit(v)):
                    return True
        state[u] = 2
        return False

    return any(state[u] == 0 and visit(u) for u in range(n))


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "gradient correctness")
def test_gradient_correctness():
    start = time.perf_counter()
    worst = {"inner": 0.0, "outer_shallow": 0.0, "outer_deep": 0.0, "codec": 0.0}
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))

        h = rng.normal(size=(3, n, 2))
        sem = di.identity_sem(2, noise=0.2, seed=seed)
        eps = rng.normal(size=h.shape)
        w_in = dict(sem.weights, A=0.3 * rng.normal(size=(n, n)))
        inner_loss = lambda w: di.inner_objective(h, w["A"], {k: w[k] for k in di.SEM_KEYS}, 0.7, 3.0, eps)[0]
        for key in ("A", "enc_w1", "dec_w2"):
            worst["inner"] = max(worst["inner"], tape_vs_fd(inner_loss, w_in, key))

        deep = seed % 2 == 1
        lag, horizon = (4, 3) if deep else (2, 2)
        n_out = min(n, 4)
        cfg = go.ForecasterConfig(n_nodes=n_out, in_dim=2, hidden=3, order=1, lag=lag, horizon=horizon, seed=seed)
        params = go.init_params(cfg, scale=1.5)
        params.weights["delta"] = rng.normal(size=(n_out, n_out))
        hs, adj = rng.normal(size=(10, n_out, 2)), rng.random((10, n_out, n_out))
        starts = go.window_starts(np.arange(10), lag, horizon)
        a_win, h_win, target = go.gather_windows(hs, adj, starts, lag, horizon)
        noise = go.sample_gumbel(a_win.shape, rng)
        outer_loss = lambda w: go.forecast_loss(w, cfg, a_win, h_win, target, 0.7, noise)
        name = "outer_deep" if deep else "outer_shallow"
        for key in ("enc_r_theta", "dec_c_theta", "proj_w", "delta"):
            worst[name] = max(worst[name], tape_vs_fd(outer_loss, params.weights, key))

        cp = cd.init_params(3, 2, hidden=4, seed=seed)
        rows = rng.normal(size=(6, 3))
        for key in ("enc_w1", "enc_b2", "dec_w1", "dec_w2"):
            worst["codec"] = max(worst["codec"], tape_vs_fd(lambda w: cd.codec_loss(w, rows), cp.weights, key))
    elapsed = time.perf_counter() - start
    print(f"\nworst relative errors {worst}; {elapsed:.1f}s")
    assert worst["inner"] <= 1e-4 and worst["codec"] <= 1e-4 and worst["outer_shallow"] <= 1e-4
    assert worst["outer_deep"] <= 1e-3
    assert elapsed <= 120


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "acyclicity semantics")
def test_acyclicity_semantics():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 15))
        perm = rng.permutation(n)
        dag = np.triu(rng.normal(size=(n, n)) * (rng.random((n, n)) < 0.5), k=1)[np.ix_(perm, perm)]
        assert not has_cycle(dag)
        assert di.acyclicity(dag) == 0.0
    for _ in range(200):
        n = int(rng.integers(2, 15))
        a = np.triu(rng.normal(size=(n, n)) * (rng.random((n, n)) < 0.3), k=1)
        length = int(rng.integers(1, n + 1))
        cyc = rng.choice(n, length, replace=False)
        for u, v in zip(cyc, np.roll(cyc, -1)):
            a[u, v] = rng.uniform(0.2, 1.0) * rng.choice([-1, 1])
        perm = rng.permutation(n)
        a = a[np.ix_(perm, perm)]
        assert has_cycle(a)
        assert di.acyclicity(a) > 0
    for _ in range(200):                    # unrestricted sparse graphs against the search oracle
        n = int(rng.integers(2, 10))
        a = rng.normal(size=(n, n)) * (rng.random((n, n)) < 0.2)
        assert (di.acyclicity(a) > 0) == has_cycle(a)
    assert time.perf_counter() - start <= 30


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "causal recovery from SEM data")
def test_causal_recovery():
    start = time.perf_counter()
    aucs, alphas = [], []
    for seed in range(5):
        truth, x = sy.gen_sem(10, 0.2, 500, noise_std=1.0, seed=seed)
        seq, _ = di.fit_inner(x[:, :, None], di.InnerConfig(tied=True, seed=seed))
        aucs.append(sy.edge_recovery_report(seq.adjacency[0], truth.dag)["auc"])
        if seq.converged:
            alphas.append(float(seq.alphas.max()))
    elapsed = time.perf_counter() - start
    print(f"\nedge AUC per seed {np.round(aucs, 3)}, mean {np.mean(aucs):.3f}; "
          f"converged {len(alphas)}/5, max alpha {max(alphas, default=np.nan):.2e}; {elapsed:.0f}s")
    assert np.mean(aucs) >= 0.8
    assert all(a <= 1e-6 for a in alphas)
    assert elapsed <= 600


# ---------------------------------------------------------------- 4

def forecasting_config():
    cfg = ex.RunConfig()
    # full outer budget; the untied inner stage at T=2000 gets a reduced step budget
    for key, value in [("outer.lag", "4"), ("outer.horizon", "4"), ("inner.lr", "1e-2"),
                       ("inner.steps_per_stage", "20"), ("inner.max_stages", "3"),
                       ("outer.refresh_steps", "20"), ("outer.refresh_stages", "1")]:
        ex.set_option(cfg, key, value)
    return cfg.validate()


@pytest.mark.criterion(4, "forecasting skill against persistence")
def test_forecasting_skill():
    start = time.perf_counter()
    ratios = []
    for seed in range(3):
        _, series = sy.gen_var(8, 4, 2000, lag=4, seed=seed)
        group = make_cv_groups(series, 4)[0]
        m = ex.run_single(series, None, group, seed + 1, forecasting_config()).metrics
        ratios.append(m["mae_sgm"] / m["mae_persistence"])
        print(f"\nseed {seed}: SGM {m['mae_sgm']:.4f} persistence {m['mae_persistence']:.4f}")
    elapsed = time.perf_counter() - start
    print(f"mean ratio {np.mean(ratios):.3f}; {elapsed:.0f}s")
    assert np.mean(ratios) <= 0.8
    assert elapsed <= 900


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5, "persistence blend")
def test_blend_search_and_convexity():
    rng = np.random.default_rng(0)
    grid = ev.default_grid(21)
    for _ in range(50):
        truth = rng.normal(size=(4, 3, 24))
        sgm = truth + rng.normal(scale=rng.uniform(0.1, 2), size=truth.shape)
        pers = truth + rng.normal(scale=rng.uniform(0.1, 2), size=truth.shape)
        alpha, curve = ev.blend_search(sgm, pers, truth, grid)
        assert curve[alpha] <= min(curve[0.0], curve[1.0])
        assert curve[1.0] == ev.mae(sgm, truth) and curve[0.0] == ev.mae(pers, truth)
        vals = np.array([curve[a] for a in grid])
        assert np.all(vals[:-2] - 2 * vals[1:-1] + vals[2:] >= -1e-12)


# ---------------------------------------------------------------- 6

def anomaly_config():
    cfg = ex.RunConfig()
    for key, value in [("anomaly.source", "observation"), ("codec.h_dim", "2"), ("outer.lag", "4"),
                       ("outer.horizon", "4"), ("outer.epochs", "2"), ("outer.hidden", "8"),
                       ("inner.lr", "1e-2"), ("inner.steps_per_stage", "5"), ("inner.max_stages", "1"),
                       ("outer.alternate", "false"), ("eval.n_groups", "4"), ("eval.seeds", "1 2 3 4")]:
        ex.set_option(cfg, key, value)
    return cfg.validate()


@pytest.mark.criterion(6, "anomaly detection AUC")
def test_anomaly_detection():
    start = time.perf_counter()
    _, series = sy.gen_var(8, 4, 2000, lag=4, seed=0)
    series, labels = sy.inject_anomalies(series, 0.005, 8.0, seed=1)
    report = ex.run_experiment(series, labels, anomaly_config())
    elapsed = time.perf_counter() - start
    table = report.table("anomaly")
    print("\nAnomaly detection (AUC-ROC)\n" + table + f"\n{elapsed:.0f}s")
    aucs = [r["metrics"]["auc"] for r in report.runs]
    assert len(aucs) == 16 and all(a is not None for a in aucs)
    for g in report.groups():
        assert report.aggregate()["auc"][str(g)]["n"] == 4
    assert table.splitlines()[0].split()[0] == "Method" and "±" in table
    assert np.mean(aucs) >= 0.8
    assert elapsed <= 600


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7, "metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(4, 80))
        scores = rng.integers(0, 8, n).astype(float)
        labels = (rng.random(n) < 0.3).astype(int)
        labels[:2] = [0, 1]
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
        assert abs(ev.auc_roc(scores, labels) - pairs / (len(pos) * len(neg))) <= 1e-12
    for _ in range(50):
        a, b = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
        total = 0.0
        for idx in itertools.product(range(3), range(5), range(4)):
            total += abs(a[idx] - b[idx])
        assert abs(ev.mae(a, b) - total / 60) <= 1e-12
        x, y = rng.integers(0, 2, 40), rng.integers(0, 2, 40)
        assert abs(ev.accuracy(x, y) - sum(int(p == q) for p, q in zip(x, y)) / 40) <= 1e-12
        inter = sum(1 for p, q in zip(x, y) if p and q)
        union = sum(1 for p, q in zip(x, y) if p or q)
        assert abs(ev.iou(x.astype(bool), y.astype(bool)) - (inter / union if union else 1.0)) <= 1e-12


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8, "DAG drift export")
def test_dag_drift_export(tmp_path, capsys):
    seq = sy.gen_drifting_dags(20, 12, seed=0)
    di.export_dags(di.DagSequence(seq, di.acyclicity(seq)), tmp_path)
    files = sorted(tmp_path.glob("dag_*.csv"))
    for k, (fa, fb) in enumerate(zip(files[:-1], files[1:])):
        oracle = 0
        for i in range(20):
            for j in range(20):
                oracle += int(seq[k, i, j] != seq[k + 1, i, j])
        assert di.count_diff_cells(di.read_matrix(fa), di.read_matrix(fb)) == oracle
        assert cli.main(["dag-diff", str(fa), str(fb)]) == 0
        assert json.loads(capsys.readouterr().out)["differing_cells"] == oracle
        assert 0 < oracle < 0.1 * 400


# ---------------------------------------------------------------- 9 and 10

class Clock:
    def __init__(self, day):
        self.day = day

    def __call__(self):
        return dt.datetime(2024, 3, self.day, 9, 30, tzinfo=dt.timezone.utc)


@pytest.fixture(scope="module")
def two_pipeline_runs(tmp_path_factory):
    out = {}
    mp = pytest.MonkeyPatch()
    try:
        for day in (4, 5):
            d = tmp_path_factory.mktemp(f"day{day}")
            mp.setattr(cli, "now", Clock(day))
            start = time.perf_counter()
            codes = [cli.main([cmd, "-c", TINY, "--run-dir", str(d)]) for cmd in ("synth", "pipeline")]
            out[day] = (d, codes, time.perf_counter() - start)
    finally:
        mp.undo()
    return out


@pytest.mark.criterion(9, "determinism across days")
def test_pipeline_deterministic_across_days(two_pipeline_runs):
    (d1, c1, _), (d2, c2, _) = two_pipeline_runs[4], two_pipeline_runs[5]
    assert c1 == c2 == [0, 0]
    m1, m2 = json.loads((d1 / "manifest.json").read_text()), json.loads((d2 / "manifest.json").read_text())
    assert m1["commands"][0]["at"].startswith("2024-03-04") and m2["commands"][0]["at"].startswith("2024-03-05")
    assert (d1 / "metrics.json").read_bytes() == (d2 / "metrics.json").read_bytes()


@pytest.mark.criterion(10, "tiny end-to-end smoke run")
def test_tiny_pipeline_smoke(two_pipeline_runs):
    d, codes, elapsed = two_pipeline_runs[4]
    print(f"\ntiny pipeline {elapsed:.1f}s\n" + (d / "report.txt").read_text())
    assert codes == [0, 0]
    report = ex.MetricsReport.load(d / "metrics.json")
    assert len(report.runs) == 4
    for name in ("codec.json", "dags/manifest.json", "forecaster.json", "forecast.csv", "scores.csv",
                 "metrics.json"):
        assert (d / "runs" / "g0_s1" / name).exists(), name
    assert elapsed <= 300
