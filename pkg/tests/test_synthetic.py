import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgm import synthetic as sy
from sgm.dag_inner import acyclicity


def lag1_autocorr(x):
    x = x - x.mean()
    return float((x[1:] * x[:-1]).sum() / (x * x).sum())


def test_gen_sem_empty_graph_covariance():
    n = 5
    truth, x = sy.gen_sem(n, 0.5, 10_000, noise_std=1.5, seed=0, weights=np.zeros((n, n)))
    assert truth.dag.sum() == 0
    cov = np.cov(x.T)
    np.testing.assert_allclose(np.diag(cov), 1.5 ** 2, rtol=0.1)
    assert np.abs(cov - np.diag(np.diag(cov))).max() < 0.1 * 1.5 ** 2


@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
@settings(max_examples=40, deadline=None)
def test_gen_sem_dag_is_acyclic(seed, p):
    truth, _ = sy.gen_sem(8, p, 5, seed=seed)
    assert acyclicity(truth.weights) == 0.0
    np.testing.assert_array_equal(np.diag(truth.weights), 0.0)


def test_gen_sem_single_edge_variance():
    w = 1.5
    weights = np.array([[0.0, w], [0.0, 0.0]])
    _, x = sy.gen_sem(2, 0.5, 200_000, noise_std=1.0, seed=1, weights=weights)
    assert np.var(x[:, 1]) == pytest.approx(1 + w ** 2, rel=0.02)
    assert np.var(x[:, 0]) == pytest.approx(1.0, rel=0.02)


def test_gen_sem_weight_range():
    truth, _ = sy.gen_sem(30, 0.3, 2, seed=3)
    nz = np.abs(truth.weights[truth.weights != 0])
    assert nz.min() >= 0.5 and nz.max() <= 2.0


def test_gen_sem_is_pure_function_of_seed():
    a = sy.gen_sem(6, 0.3, 20, seed=9)
    b = sy.gen_sem(6, 0.3, 20, seed=9)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[0].weights, b[0].weights)


def test_gen_sem_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sy.gen_sem(1, 0.5, 10)
    with pytest.raises(ValueError):
        sy.gen_sem(4, 0.0, 10)


def test_gen_var_white_noise():
    _, s = sy.gen_var(3, 2, 5000, lag=1, coefs=np.zeros((1, 3, 3)), seed=0)
    for i in range(3):
        assert abs(lag1_autocorr(s.values[i, 0])) < 0.05


def test_gen_var_ar1_autocorrelation():
    _, s = sy.gen_var(3, 2, 20_000, lag=1, coefs=0.9 * np.eye(3)[None], seed=0)
    for i in range(3):
        assert lag1_autocorr(s.values[i, 1]) == pytest.approx(0.9, abs=0.02)


def test_gen_var_shape_finite_and_stable():
    truth, s = sy.gen_var(6, 2, 10_000, seed=4)
    assert s.shape == (6, 2, 10_000)
    assert np.all(np.isfinite(s.values)) and np.abs(s.values).max() <= 1e6
    assert sy._companion_radius(truth.granger) < 1.0


def test_gen_var_rescales_explosive_coefficients():
    truth, s = sy.gen_var(2, 1, 500, coefs=np.array([[[1.5, 0.3], [0.2, 1.4]]]), seed=0)
    assert sy._companion_radius(truth.granger) < 0.95


def test_granger_edges_orientation():
    coefs = np.zeros((2, 3, 3))
    coefs[1, 2, 0] = 0.5                     # x0 drives x2 at lag 2
    truth = sy.GroundTruth(granger=coefs)
    edges = truth.granger_edges()
    assert edges[0, 2] == 1 and edges.sum() == 1


def test_inject_rate_binomial():
    _, s = sy.gen_var(238, 1, 720, seed=0, burn_in=10, coefs=np.zeros((1, 238, 238)))
    _, lab = sy.inject_anomalies(s, 0.005, seed=1, n_features=1)
    n = 238 * 720
    mean, sd = n * 0.005, np.sqrt(n * 0.005 * 0.995)
    assert abs(lab.values.sum() - mean) < 4 * sd


def test_inject_zero_magnitude_keeps_series():
    _, s = sy.gen_var(5, 3, 300, seed=0)
    s2, lab = sy.inject_anomalies(s, 0.02, magnitude_sigmas=0.0, seed=2)
    assert lab.values.sum() > 0
    np.testing.assert_array_equal(s2.values, s.values)


def test_inject_same_seed_same_mask():
    _, s = sy.gen_var(5, 3, 300, seed=0)
    a = sy.inject_anomalies(s, 0.01, seed=5)[1].values
    b = sy.inject_anomalies(s, 0.01, seed=5)[1].values
    np.testing.assert_array_equal(a, b)


def test_inject_spikes_only_on_labelled_hours():
    _, s = sy.gen_var(5, 4, 300, seed=0)
    s2, lab = sy.inject_anomalies(s, 0.01, seed=5)
    changed = np.any(s2.values != s.values, axis=1)
    np.testing.assert_array_equal(changed, lab.values.astype(bool))


def test_inject_rate_too_high():
    _, s = sy.gen_var(2, 1, 50, seed=0)
    with pytest.raises(ValueError):
        sy.inject_anomalies(s, 0.05)


def test_report_perfect_estimate():
    truth, _ = sy.gen_sem(8, 0.3, 2, seed=0)
    rep = sy.edge_recovery_report(truth.dag * 0.9, truth.dag, thresholds=(0.2, 0.5, 0.8))
    assert rep["auc"] == 1.0
    assert all(v == 0 for v in rep["shd"].values())


def test_report_negated_weights_still_perfect():
    truth, _ = sy.gen_sem(8, 0.3, 2, seed=0)
    assert sy.edge_recovery_report(-truth.weights, truth.dag)["auc"] == 1.0


def test_report_random_estimate_is_chance():
    truth, _ = sy.gen_sem(10, 0.3, 2, seed=0)
    aucs = [sy.edge_recovery_report(np.random.default_rng(s).normal(size=(10, 10)), truth.dag)["auc"]
            for s in range(100)]
    assert abs(np.mean(aucs) - 0.5) < 0.05


def test_report_size_mismatch():
    with pytest.raises(ValueError):
        sy.edge_recovery_report(np.zeros((3, 3)), np.zeros((4, 4)))


def test_drifting_dags_are_acyclic_and_change_slowly():
    seq = sy.gen_drifting_dags(12, 20, seed=0)
    assert np.all(acyclicity(seq) == 0)
    for a, b in zip(seq[:-1], seq[1:]):
        diff = int((a != b).sum())
        assert diff >= 1 and diff / a.size < 0.1
