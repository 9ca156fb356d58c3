"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``GRAPHOPS_BACKEND``
environment variable: ``numba`` (require numba), ``numpy`` (force the
fallback), or ``auto`` (default: numba when importable). Both paths
compute the same quantities; summation order may differ in the last bits.

Only kernels where loop fusion or scattered accumulation actually beats
vectorized numpy live here. Matmul- and convolution-shaped work stays on
numpy/BLAS in the engine, where it is already fastest.
"""

import os

import numpy as np

_choice = os.environ.get("GRAPHOPS_BACKEND", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"GRAPHOPS_BACKEND must be auto, numba or numpy, got {_choice!r}")

if _choice in ("auto", "numba"):
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        if _choice == "numba":
            raise
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations (always defined; the reference semantics)
# ---------------------------------------------------------------------------

def _softmax_fwd_np(x, mask):
    # x (N, C), mask (N, C) bool or None; masked-out entries get weight 0
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        neg = np.where(mask, x, -np.inf)
        shifted = neg - neg.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(g, s):
    return s * (g - (g * s).sum(axis=1, keepdims=True))


def _layernorm_fwd_np(x, gain, bias, slope, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    pre = xhat * gain + bias
    pos = pre > 0.0
    out = np.where(pos, pre, slope * pre)
    return out, xhat, rstd[:, 0], pos


def _layernorm_bwd_np(g, xhat, rstd, gain, pos, slope):
    dpre = g * np.where(pos, 1.0, slope)
    dgain = (dpre * xhat).sum(axis=0)
    dbias = dpre.sum(axis=0)
    dxhat = dpre * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _scatter_rows_np(g, idx, n_rows):
    # g (N, M, C), idx (N, M) -> (N, n_rows, C)
    out = np.zeros((g.shape[0], n_rows, g.shape[2]))
    np.add.at(out, (np.arange(g.shape[0])[:, None], idx), g)
    return out


def _scatter_last_np(g, idx, n_cols):
    # g (N, M), idx (N, M) -> (N, n_cols)
    out = np.zeros((g.shape[0], n_cols))
    np.add.at(out, (np.arange(g.shape[0])[:, None], idx), g)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_fwd_nb(x, out):
        n, c = x.shape
        for i in range(n):
            hi = x[i, 0]
            for j in range(1, c):
                if x[i, j] > hi:
                    hi = x[i, j]
            tot = 0.0
            for j in range(c):
                e = np.exp(x[i, j] - hi)
                out[i, j] = e
                tot += e
            for j in range(c):
                out[i, j] /= tot

    @njit(cache=True)
    def _softmax_fwd_masked_nb(x, mask, out):
        n, c = x.shape
        for i in range(n):
            hi = -np.inf
            for j in range(c):
                if mask[i, j] and x[i, j] > hi:
                    hi = x[i, j]
            tot = 0.0
            for j in range(c):
                if mask[i, j]:
                    e = np.exp(x[i, j] - hi)
                    out[i, j] = e
                    tot += e
                else:
                    out[i, j] = 0.0
            for j in range(c):
                out[i, j] /= tot

    @njit(cache=True)
    def _softmax_bwd_nb(g, s, out):
        n, c = g.shape
        for i in range(n):
            dot = 0.0
            for j in range(c):
                dot += g[i, j] * s[i, j]
            for j in range(c):
                out[i, j] = s[i, j] * (g[i, j] - dot)

    @njit(cache=True)
    def _layernorm_fwd_nb(x, gain, bias, slope, eps, out, xhat, rstd, pos):
        n, c = x.shape
        for i in range(n):
            m = 0.0
            for j in range(c):
                m += x[i, j]
            m /= c
            v = 0.0
            for j in range(c):
                d = x[i, j] - m
                v += d * d
            v /= c
            r = 1.0 / np.sqrt(v + eps)
            rstd[i] = r
            for j in range(c):
                xh = (x[i, j] - m) * r
                xhat[i, j] = xh
                p = xh * gain[j] + bias[j]
                pos[i, j] = p > 0.0
                out[i, j] = p if p > 0.0 else slope * p

    @njit(cache=True)
    def _layernorm_bwd_nb(g, xhat, rstd, gain, pos, slope, dx, dgain, dbias):
        n, c = g.shape
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                dpre = g[i, j] if pos[i, j] else slope * g[i, j]
                dgain[j] += dpre * xhat[i, j]
                dbias[j] += dpre
                dxh = dpre * gain[j]
                dx[i, j] = dxh
                m1 += dxh
                m2 += dxh * xhat[i, j]
            m1 /= c
            m2 /= c
            r = rstd[i]
            for j in range(c):
                dx[i, j] = r * (dx[i, j] - m1 - xhat[i, j] * m2)

    @njit(cache=True)
    def _scatter_rows_nb(g, idx, out):
        n, m, c = g.shape
        for i in range(n):
            for k in range(m):
                j = idx[i, k]
                for q in range(c):
                    out[i, j, q] += g[i, k, q]

    @njit(cache=True)
    def _scatter_last_nb(g, idx, out):
        n, m = g.shape
        for i in range(n):
            for k in range(m):
                out[i, idx[i, k]] += g[i, k]


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def softmax_fwd(x, mask=None):
    """Row softmax of a (N, C) array; optional boolean keep-mask."""
    if BACKEND == "numba":
        out = np.empty_like(x)
        if mask is None:
            _softmax_fwd_nb(x, out)
        else:
            _softmax_fwd_masked_nb(x, np.ascontiguousarray(mask), out)
        return out
    return _softmax_fwd_np(x, mask)


def softmax_bwd(g, s):
    if BACKEND == "numba":
        out = np.empty_like(g)
        _softmax_bwd_nb(g, s, out)
        return out
    return _softmax_bwd_np(g, s)


def layernorm_fwd(x, gain, bias, slope, eps):
    """Fused per-row layernorm + affine + leaky rectification on (N, C).

    Returns (out, xhat, rstd, pos) with the saved intermediates the
    backward pass needs.
    """
    if BACKEND == "numba":
        n, c = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        pos = np.empty((n, c), dtype=np.bool_)
        _layernorm_fwd_nb(x, gain, bias, slope, eps, out, xhat, rstd, pos)
        return out, xhat, rstd, pos
    return _layernorm_fwd_np(x, gain, bias, slope, eps)


def layernorm_bwd(g, xhat, rstd, gain, pos, slope):
    if BACKEND == "numba":
        dx = np.empty_like(g)
        dgain = np.zeros_like(gain)
        dbias = np.zeros_like(gain)
        _layernorm_bwd_nb(g, xhat, rstd, gain, pos, slope, dx, dgain, dbias)
        return dx, dgain, dbias
    return _layernorm_bwd_np(g, xhat, rstd, gain, pos, slope)


def scatter_rows_add(g, idx, n_rows):
    """Accumulate g (N, M, C) into rows idx (N, M) of a zero (N, n_rows, C)."""
    if BACKEND == "numba":
        out = np.zeros((g.shape[0], n_rows, g.shape[2]))
        _scatter_rows_nb(np.ascontiguousarray(g), idx, out)
        return out
    return _scatter_rows_np(g, idx, n_rows)


def scatter_last_add(g, idx, n_cols):
    """Accumulate g (N, M) into columns idx (N, M) of a zero (N, n_cols)."""
    if BACKEND == "numba":
        out = np.zeros((g.shape[0], n_cols))
        _scatter_last_nb(np.ascontiguousarray(g), idx, out)
        return out
    return _scatter_last_np(g, idx, n_cols)
