"""The numba kernels and their numpy twins must agree exactly (or to 1e-12)."""
import os
import subprocess
import sys

import numpy as np
import pytest

from sgm import _kernels as K


@pytest.mark.parametrize("seed", range(5))
def test_var_simulate_agree(seed):
    rng = np.random.default_rng(seed)
    coefs = rng.normal(0, 0.15, size=(3, 5, 5))
    noise = rng.normal(size=(200, 5, 2))
    init = rng.normal(size=(3, 5, 2))
    np.testing.assert_allclose(K.numba_impl.var_simulate(coefs, noise, init),
                               K.numpy_impl.var_simulate(coefs, noise, init), rtol=1e-12, atol=1e-12)


def test_var_simulate_matches_loop_oracle():
    rng = np.random.default_rng(3)
    coefs = rng.normal(0, 0.2, size=(2, 3, 3))
    noise = rng.normal(size=(30, 3, 1))
    init = np.zeros((2, 3, 1))
    hist = [init[0], init[1]]                # oldest first
    expected = []
    for t in range(30):
        x = coefs[0] @ hist[-1] + coefs[1] @ hist[-2] + noise[t]
        expected.append(x)
        hist.append(x)
    np.testing.assert_allclose(K.numpy_impl.var_simulate(coefs, noise, init), np.stack(expected), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_trace_power_agree(seed):
    m = np.random.default_rng(seed).random((6, 6))
    expected = np.trace(np.linalg.matrix_power(m, 6))
    assert K.numba_impl.trace_power(m, 6) == pytest.approx(expected, rel=1e-12)
    assert K.numpy_impl.trace_power(m, 6) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_auc_rank_agree(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, size=60).astype(float)
    y = (rng.random(60) < 0.4).astype(np.int64)
    y[0], y[1] = 0, 1
    assert K.numba_impl.auc_rank(s, y) == pytest.approx(K.numpy_impl.auc_rank(s, y), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_shd_and_count_diff_agree(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=(7, 7))
    b = rng.integers(0, 2, size=(7, 7))
    assert K.numba_impl.shd(a, b) == K.numpy_impl.shd(a, b)
    x, y = rng.normal(size=(7, 7)), rng.normal(size=(7, 7))
    y[:3] = x[:3]
    assert K.numba_impl.count_diff(x, y, 0.0) == K.numpy_impl.count_diff(x, y, 0.0) == 28


def test_shd_counts_unordered_pairs():
    truth = np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    reversed_edge = truth.T
    assert K.shd(reversed_edge, truth) == 1
    assert K.shd(truth, truth) == 0
    assert K.shd(np.zeros((3, 3), int), truth) == 1


def test_env_flag_selects_numpy_path():
    code = "from sgm import _kernels as K; print(K.USE_NUMBA, K.active is K.numpy_impl)"
    env = dict(os.environ, SGM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
