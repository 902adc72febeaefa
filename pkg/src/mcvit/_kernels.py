"""Fused inner loops for the tensor ops.

Single-pass numba kernels for the reductions that dominate CPU time
(layer norm, attention softmax, GELU, the optimizer update). Transcendental
functions stay in numpy (`np.exp`, `np.tanh`) because its SIMD versions beat
scalar libm calls by a wide margin; the kernels here handle the surrounding
shift/normalize/derivative passes. All kernels take 2-D contiguous float64
views and write into caller-provided buffers.
"""

import math

import numpy as np
from numba import njit

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@njit(cache=True, fastmath=True)
def ln_forward(x, gamma, beta, y, xhat, rstd, eps):
    rows, n = x.shape
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mu
            var += d * d
        var /= n
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for j in range(n):
            h = (x[r, j] - mu) * rs
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]


@njit(cache=True, fastmath=True)
def ln_backward(g, xhat, rstd, gamma, dx, dgamma, dbeta):
    rows, n = g.shape
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gh = g[r, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[r, j]
        s1 /= n
        s2 /= n
        rs = rstd[r]
        for j in range(n):
            gh = g[r, j] * gamma[j]
            dx[r, j] = rs * (gh - s1 - xhat[r, j] * s2)
            dgamma[j] += g[r, j] * xhat[r, j]
            dbeta[j] += g[r, j]


@njit(cache=True, fastmath=True)
def rows_shift_max(x, out):
    # out = x - rowmax(x); exp is applied by the caller via np.exp.
    rows, n = x.shape
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        for j in range(n):
            out[r, j] = x[r, j] - m


@njit(cache=True, fastmath=True)
def rows_normalize_sum(p):
    # in place: p[r] /= sum(p[r])
    rows, n = p.shape
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += p[r, j]
        inv = 1.0 / s
        for j in range(n):
            p[r, j] *= inv


@njit(cache=True, fastmath=True)
def softmax_backward(p, g, out):
    # out = p * (g - <p, g>) per row
    rows, n = p.shape
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += p[r, j] * g[r, j]
        for j in range(n):
            out[r, j] = p[r, j] * (g[r, j] - dot)


@njit(cache=True, fastmath=True)
def gelu_inner_arg(x, u):
    # u = sqrt(2/pi) * (x + a*x^3); caller applies np.tanh in place.
    n = x.size
    for i in range(n):
        v = x[i]
        u[i] = _GELU_C * (v + _GELU_A * v * v * v)


@njit(cache=True, fastmath=True)
def gelu_finish(x, t, y):
    # y = 0.5 * x * (1 + tanh(u)); t holds tanh(u)
    n = x.size
    for i in range(n):
        y[i] = 0.5 * x[i] * (1.0 + t[i])


@njit(cache=True, fastmath=True)
def gelu_backward(x, t, g, dx):
    n = x.size
    for i in range(n):
        v = x[i]
        th = t[i]
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        dx[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)


@njit(cache=True, fastmath=True)
def rows_l2norm_forward(x, y, inv_norm):
    rows, n = x.shape
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += x[r, j] * x[r, j]
        inv = 1.0 / math.sqrt(s)
        inv_norm[r] = inv
        for j in range(n):
            y[r, j] = x[r, j] * inv


@njit(cache=True, fastmath=True)
def rows_l2norm_backward(g, y, inv_norm, dx):
    # d/dx of x/||x||: (g - y * <g, y>) / ||x||
    rows, n = g.shape
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        inv = inv_norm[r]
        for j in range(n):
            dx[r, j] = (g[r, j] - y[r, j] * dot) * inv


@njit(cache=True, fastmath=True)
def cross_entropy_forward(logits, labels, probs):
    # returns mean NLL; probs filled with row softmax
    rows, n = logits.shape
    total = 0.0
    for r in range(rows):
        m = logits[r, 0]
        for j in range(1, n):
            if logits[r, j] > m:
                m = logits[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(logits[r, j] - m)
            probs[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            probs[r, j] *= inv
        total += math.log(s) - (logits[r, labels[r]] - m)
    return total / rows


@njit(cache=True, fastmath=True)
def cross_entropy_backward(probs, labels, gscale, dlogits):
    rows, n = probs.shape
    for r in range(rows):
        for j in range(n):
            dlogits[r, j] = probs[r, j] * gscale
        dlogits[r, labels[r]] -= gscale


@njit(cache=True, fastmath=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    # decoupled weight decay; bc1/bc2 are the bias-correction denominators
    n = p.size
    for i in range(n):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        mhat = mi / bc1
        vhat = vi / bc2
        p[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + wd * p[i])


@njit(cache=True, fastmath=True)
def heads_split_scale(x, out, nheads, scale):
    # (N, T, D) -> (N, H, T, dh), optionally scaling (for q / sqrt(dh))
    n, t, d = x.shape
    dh = d // nheads
    for i in range(n):
        for h in range(nheads):
            base = h * dh
            for r in range(t):
                for j in range(dh):
                    out[i, h, r, j] = x[i, r, base + j] * scale


@njit(cache=True, fastmath=True)
def heads_split_transpose(x, out, nheads):
    # (N, T, D) -> (N, H, dh, T)
    n, t, d = x.shape
    dh = d // nheads
    for i in range(n):
        for h in range(nheads):
            base = h * dh
            for r in range(t):
                for j in range(dh):
                    out[i, h, j, r] = x[i, r, base + j]


@njit(cache=True, fastmath=True)
def heads_merge(x, out):
    # (N, H, T, dh) -> (N, T, H*dh)
    n, nh, t, dh = x.shape
    for i in range(n):
        for h in range(nh):
            base = h * dh
            for r in range(t):
                for j in range(dh):
                    out[i, r, base + j] = x[i, h, r, j]


@njit(cache=True, fastmath=True)
def heads_merge_grad_scale(g, out, nheads, scale):
    # gradient of heads_split_scale: (N, H, T, dh) -> (N, T, D)
    n, nh, t, dh = g.shape
    for i in range(n):
        for h in range(nh):
            base = h * dh
            for r in range(t):
                for j in range(dh):
                    out[i, r, base + j] = g[i, h, r, j] * scale


@njit(cache=True, fastmath=True)
def heads_untranspose_grad(g, out, nheads):
    # gradient of heads_split_transpose: (N, H, dh, T) -> (N, T, D)
    n, nh, dh, t = g.shape
    for i in range(n):
        for h in range(nh):
            base = h * dh
            for j in range(dh):
                for r in range(t):
                    out[i, r, base + j] = g[i, h, j, r]


def warmup():
    """Force-compile every kernel on tiny inputs (cached across processes)."""
    x = np.zeros((2, 4))
    g = np.ones(4)
    b = np.zeros(4)
    y = np.empty_like(x)
    xh = np.empty_like(x)
    rs = np.empty(2)
    ln_forward(x, g, b, y, xh, rs, 1e-5)
    ln_backward(y, xh, rs, g, y.copy(), g.copy(), b.copy())
    rows_shift_max(x, y)
    p = np.full((2, 4), 0.25)
    rows_normalize_sum(p)
    softmax_backward(p, x, y)
    fx = np.zeros(8)
    fu = np.empty(8)
    gelu_inner_arg(fx, fu)
    gelu_finish(fx, fu, fu.copy())
    gelu_backward(fx, fu, fu.copy(), fu.copy())
    rows_l2norm_forward(np.ones((2, 4)), y, rs)
    rows_l2norm_backward(x, y, rs, y.copy())
    lab = np.zeros(2, dtype=np.int64)
    cross_entropy_forward(x, lab, y)
    cross_entropy_backward(y, lab, 0.5, y.copy())
    adamw_update(fx, fu, fu.copy(), fu.copy(), 0.1, 0.9, 0.999, 1e-8, 0.0, 0.1, 0.001)
    x3 = np.zeros((1, 2, 4))
    o4 = np.empty((1, 2, 2, 2))
    heads_split_scale(x3, o4, 2, 1.0)
    heads_split_transpose(x3, o4, 2)
    heads_merge(o4, x3.copy())
    heads_merge_grad_scale(o4, x3.copy(), 2, 1.0)
    heads_untranspose_grad(o4, x3.copy(), 2)
