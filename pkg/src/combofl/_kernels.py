"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``COMBOFL_DISABLE_NUMBA`` is unset or ``0``.  Both paths are always
importable as ``<name>_numba`` / ``<name>_numpy`` so tests and the benchmark
can compare them directly; the unsuffixed names dispatch to the active one.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get("COMBOFL_DISABLE_NUMBA", "0") in ("", "0")

# relative slack when deciding that a constraint is saturated
_SAT_EPS = 1e-12


# --------------------------------------------------------------------------
# max-min fair rate allocation (progressive filling)
# --------------------------------------------------------------------------

@njit(cache=True)
def maxmin_rates_numba(src, dst, cap_out, cap_in, pair_cap):
    m = src.shape[0]
    nn = cap_out.shape[0]
    rates = np.zeros(m)
    frozen = np.zeros(m, dtype=np.bool_)
    rem_out = cap_out.astype(np.float64).copy()
    rem_in = cap_in.astype(np.float64).copy()
    cnt_out = np.zeros(nn, dtype=np.int64)
    cnt_in = np.zeros(nn, dtype=np.int64)
    sat_out = np.zeros(nn, dtype=np.bool_)
    sat_in = np.zeros(nn, dtype=np.bool_)
    level = 0.0
    active = m
    while active > 0:
        cnt_out[:] = 0
        cnt_in[:] = 0
        for f in range(m):
            if not frozen[f]:
                cnt_out[src[f]] += 1
                cnt_in[dst[f]] += 1
        inc = pair_cap - level
        for v in range(nn):
            if cnt_out[v] > 0:
                share = rem_out[v] / cnt_out[v]
                if share < inc:
                    inc = share
            if cnt_in[v] > 0:
                share = rem_in[v] / cnt_in[v]
                if share < inc:
                    inc = share
        if inc < 0.0:
            inc = 0.0
        thresh = inc * (1.0 + _SAT_EPS)
        pair_sat = (pair_cap - level) <= thresh
        for v in range(nn):
            sat_out[v] = False
            sat_in[v] = False
            if cnt_out[v] > 0:
                if rem_out[v] / cnt_out[v] <= thresh:
                    sat_out[v] = True
                    rem_out[v] = 0.0
                else:
                    rem_out[v] -= inc * cnt_out[v]
            if cnt_in[v] > 0:
                if rem_in[v] / cnt_in[v] <= thresh:
                    sat_in[v] = True
                    rem_in[v] = 0.0
                else:
                    rem_in[v] -= inc * cnt_in[v]
        level = pair_cap if pair_sat else level + inc
        for f in range(m):
            if not frozen[f]:
                rates[f] = level
                if pair_sat or sat_out[src[f]] or sat_in[dst[f]]:
                    frozen[f] = True
                    active -= 1
    return rates


def maxmin_rates_numpy(src, dst, cap_out, cap_in, pair_cap):
    m = src.shape[0]
    nn = cap_out.shape[0]
    rates = np.zeros(m)
    frozen = np.zeros(m, dtype=bool)
    rem_out = np.asarray(cap_out, dtype=np.float64).copy()
    rem_in = np.asarray(cap_in, dtype=np.float64).copy()
    level = 0.0
    while not frozen.all():
        live = ~frozen
        cnt_out = np.bincount(src[live], minlength=nn)
        cnt_in = np.bincount(dst[live], minlength=nn)
        with np.errstate(divide="ignore", invalid="ignore"):
            share_out = np.where(cnt_out > 0, rem_out / cnt_out, np.inf)
            share_in = np.where(cnt_in > 0, rem_in / cnt_in, np.inf)
        inc = min(pair_cap - level, share_out.min(), share_in.min())
        inc = max(inc, 0.0)
        thresh = inc * (1.0 + _SAT_EPS)
        pair_sat = (pair_cap - level) <= thresh
        sat_out = share_out <= thresh
        sat_in = share_in <= thresh
        rem_out = np.where(sat_out, 0.0, rem_out - inc * cnt_out)
        rem_in = np.where(sat_in, 0.0, rem_in - inc * cnt_in)
        level = pair_cap if pair_sat else level + inc
        rates[live] = level
        newly = live & (pair_sat | sat_out[src] | sat_in[dst])
        frozen |= newly
    return rates


# --------------------------------------------------------------------------
# segment-wise weighted aggregation
# --------------------------------------------------------------------------

@njit(cache=True)
def segment_aggregate_numba(models, weights, providers, bounds):
    k = providers.shape[0]
    n_seg = providers.shape[1]
    width = providers.shape[2]
    dim = models.shape[1]
    out = np.empty((k, dim))
    for i in range(k):
        for l in range(n_seg):
            lo = bounds[l]
            hi = bounds[l + 1]
            wsum = 0.0
            for p in range(width):
                r = providers[i, l, p]
                if r < 0:
                    break
                wsum += weights[r]
            for x in range(lo, hi):
                acc = 0.0
                for p in range(width):
                    r = providers[i, l, p]
                    if r < 0:
                        break
                    acc += weights[r] * models[r, x]
                out[i, x] = acc / wsum
    return out


def segment_aggregate_numpy(models, weights, providers, bounds):
    k, n_seg, width = providers.shape
    out = np.empty((k, models.shape[1]))
    for i in range(k):
        for l in range(n_seg):
            lo, hi = bounds[l], bounds[l + 1]
            acc = np.zeros(hi - lo)
            wsum = 0.0
            for p in range(width):
                r = providers[i, l, p]
                if r < 0:
                    break
                wsum += weights[r]
                acc += weights[r] * models[r, lo:hi]
            out[i, lo:hi] = acc / wsum
    return out


# --------------------------------------------------------------------------
# full-batch gradient descent on a quadratic  0.5 (w-c)^T A (w-c)
# --------------------------------------------------------------------------

@njit(cache=True)
def quadratic_descent_numba(A, c, w0, alpha, steps):
    d = w0.shape[0]
    path = np.empty((steps + 1, d))
    w = w0.copy()
    diff = np.empty(d)
    path[0] = w
    for s in range(steps):
        for a in range(d):
            diff[a] = w[a] - c[a]
        for a in range(d):
            g = 0.0
            for b in range(d):
                g += A[a, b] * diff[b]
            w[a] = w[a] - alpha * g
        path[s + 1] = w
    return path


def quadratic_descent_numpy(A, c, w0, alpha, steps):
    path = np.empty((steps + 1, w0.shape[0]))
    w = w0.copy()
    path[0] = w
    for s in range(steps):
        w = w - alpha * (A @ (w - c))
        path[s + 1] = w
    return path


if USE_NUMBA:
    maxmin_rates = maxmin_rates_numba
    segment_aggregate = segment_aggregate_numba
    quadratic_descent = quadratic_descent_numba
else:
    maxmin_rates = maxmin_rates_numpy
    segment_aggregate = segment_aggregate_numpy
    quadratic_descent = quadratic_descent_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
