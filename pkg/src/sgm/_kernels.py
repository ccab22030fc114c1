"""Hot numeric loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports cleanly and the environment
variable ``SGM_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are always
importable as ``numpy_impl.<name>`` / ``numba_impl.<name>`` so tests and the
benchmark can compare them directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested() -> bool:
    flag = os.environ.get("SGM_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


USE_NUMBA = numba is not None and _numba_requested()


# ---------------------------------------------------------------- numpy path

def _np_var_simulate(coefs, noise, init):
    lag = coefs.shape[0]
    steps = noise.shape[0]
    out = np.empty((lag + steps,) + noise.shape[1:])
    out[:lag] = init
    for t in range(steps):
        acc = noise[t].copy()
        for l in range(lag):
            acc += coefs[l] @ out[lag + t - 1 - l]
        out[lag + t] = acc
    return out[lag:]


def _np_trace_power(m, p):
    return float(np.trace(np.linalg.matrix_power(m, p)))


def _np_auc_rank(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # midranks for tie groups
    boundaries = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(s)]))
    for a, b in zip(starts, stops):
        ranks[a:b] = 0.5 * (a + 1 + b)
    pos = labels[order] == 1
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _np_shd(est, truth):
    # unordered pairs {i, j}, i < j, whose edge state differs in either direction
    diff = est.astype(np.int64) != truth.astype(np.int64)
    either = diff | diff.T
    return int(np.triu(either, k=1).sum())


def _np_count_diff(a, b, atol):
    return int((np.abs(a - b) > atol).sum())


numpy_impl = SimpleNamespace(
    var_simulate=_np_var_simulate,
    trace_power=_np_trace_power,
    auc_rank=_np_auc_rank,
    shd=_np_shd,
    count_diff=_np_count_diff,
)


# ---------------------------------------------------------------- numba path

if numba is not None:

    @numba.njit(cache=True)
    def _nb_var_simulate(coefs, noise, init):
        lag, n, _ = coefs.shape
        steps, _, d = noise.shape
        out = np.empty((lag + steps, n, d))
        out[:lag] = init
        for t in range(steps):
            cur = lag + t
            for i in range(n):
                for f in range(d):
                    acc = noise[t, i, f]
                    for l in range(lag):
                        prev = cur - 1 - l
                        for j in range(n):
                            acc += coefs[l, i, j] * out[prev, j, f]
                    out[cur, i, f] = acc
        return out[lag:].copy()

    @numba.njit(cache=True)
    def _nb_trace_power(m, p):
        n = m.shape[0]
        result = np.eye(n)
        base = m.copy()
        e = p
        while e > 0:
            if e & 1:
                result = result @ base
            e >>= 1
            if e:
                base = base @ base
        return np.trace(result)

    @numba.njit(cache=True)
    def _nb_auc_rank(scores, labels):
        n = scores.shape[0]
        order = np.argsort(scores, kind="mergesort")
        rank_sum = 0.0
        n_pos = 0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
                j += 1
            mid = 0.5 * (i + 1 + j + 1)
            for k in range(i, j + 1):
                if labels[order[k]] == 1:
                    rank_sum += mid
                    n_pos += 1
            i = j + 1
        n_neg = n - n_pos
        return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    @numba.njit(cache=True)
    def _nb_shd(est, truth):
        n = est.shape[0]
        count = 0
        for i in range(n):
            for j in range(i + 1, n):
                if est[i, j] != truth[i, j] or est[j, i] != truth[j, i]:
                    count += 1
        return count

    @numba.njit(cache=True)
    def _nb_count_diff(a, b, atol):
        count = 0
        fa = a.ravel()
        fb = b.ravel()
        for k in range(fa.shape[0]):
            if abs(fa[k] - fb[k]) > atol:
                count += 1
        return count

    numba_impl = SimpleNamespace(
        var_simulate=_nb_var_simulate,
        trace_power=lambda m, p: float(_nb_trace_power(np.ascontiguousarray(m, dtype=np.float64), int(p))),
        auc_rank=lambda s, y: float(_nb_auc_rank(np.ascontiguousarray(s, dtype=np.float64),
                                                 np.ascontiguousarray(y, dtype=np.int64))),
        shd=lambda e, t: int(_nb_shd(np.ascontiguousarray(e, dtype=np.int64),
                                     np.ascontiguousarray(t, dtype=np.int64))),
        count_diff=lambda a, b, atol: int(_nb_count_diff(np.ascontiguousarray(a, dtype=np.float64),
                                                         np.ascontiguousarray(b, dtype=np.float64),
                                                         float(atol))),
    )
else:  # pragma: no cover
    numba_impl = numpy_impl


active = numba_impl if USE_NUMBA else numpy_impl

var_simulate = active.var_simulate
trace_power = active.trace_power
auc_rank = active.auc_rank
shd = active.shd
count_diff = active.count_diff
