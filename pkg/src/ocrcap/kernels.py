"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one with
identical semantics. The numba path is used when numba imports cleanly and
``OCRCAP_NUMBA`` is not set to ``0``; tests exercise both paths directly via
the ``_np_*`` / ``_nb_*`` names.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - depends on environment
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("OCRCAP_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numpy path


def _np_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def _np_layer_norm_backward(g, xhat, rstd, gamma):
    n = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = (rstd / n) * (
        n * gx
        - gx.sum(axis=1, keepdims=True)
        - xhat * (gx * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _np_lcs_length(a, b):
    if len(a) == 0 or len(b) == 0:
        return 0
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for i in range(len(a)):
        cur = np.zeros(len(b) + 1, dtype=np.int64)
        match = a[i] == b
        for j in range(len(b)):
            if match[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev = cur
    return int(prev[-1])


def _np_scatter_add(weights, index, size):
    out = np.zeros(size)
    np.add.at(out, index, weights)
    return out


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _nb_softmax_rows(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(m):
                out[i, j] /= s
        return out

    @numba.njit(cache=True)
    def _nb_softmax_rows_backward(y, g):
        n, m = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += g[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(cache=True)
    def _nb_layer_norm(x, gamma, beta, eps):
        n, m = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty((n, 1))
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = x[i, j] - mu
                var += d * d
            var /= m
            r = 1.0 / np.sqrt(var + eps)
            rstd[i, 0] = r
            for j in range(m):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @numba.njit(cache=True)
    def _nb_layer_norm_backward(g, xhat, rstd, gamma):
        n, m = xhat.shape
        dx = np.empty_like(xhat)
        dgamma = np.zeros(m)
        dbeta = np.zeros(m)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(m):
                gx = g[i, j] * gamma[j]
                s1 += gx
                s2 += gx * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            scale = rstd[i, 0] / m
            for j in range(m):
                gx = g[i, j] * gamma[j]
                dx[i, j] = scale * (m * gx - s1 - xhat[i, j] * s2)
        return dx, dgamma, dbeta

    @numba.njit(cache=True)
    def _nb_lcs_length(a, b):
        n = len(a)
        m = len(b)
        if n == 0 or m == 0:
            return 0
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            for j in range(m + 1):
                prev[j] = cur[j]
        return prev[m]

    @numba.njit(cache=True)
    def _nb_scatter_add(weights, index, size):
        out = np.zeros(size)
        for i in range(len(index)):
            out[index[i]] += weights[i]
        return out


def use_numba(flag):
    """Switch the module-level dispatch; returns the previous setting."""
    global USE_NUMBA, softmax_rows, softmax_rows_backward, layer_norm
    global layer_norm_backward, lcs_length, scatter_add
    prev = USE_NUMBA
    USE_NUMBA = bool(flag) and HAVE_NUMBA
    src = "_nb_" if USE_NUMBA else "_np_"
    g = globals()
    softmax_rows = g[src + "softmax_rows"]
    softmax_rows_backward = g[src + "softmax_rows_backward"]
    layer_norm = g[src + "layer_norm"]
    layer_norm_backward = g[src + "layer_norm_backward"]
    lcs_length = g[src + "lcs_length"]
    scatter_add = g[src + "scatter_add"]
    return prev


softmax_rows = softmax_rows_backward = layer_norm = None
layer_norm_backward = lcs_length = scatter_add = None
use_numba(USE_NUMBA)
