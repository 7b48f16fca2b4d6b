"""Numba-jitted twins of the kernels in ``_kernels_numpy``.

Same signatures and semantics; loops are fused to avoid the temporaries the
numpy path materializes. Compiled lazily per dtype, cached on disk.
"""

import numpy as np
from numba import njit

BACKEND_NAME = "numba"


@njit(cache=True)
def softmax_fwd(x):
    r, t = x.shape
    y = np.empty((r, t), x.dtype)
    for i in range(r):
        m = x[i, 0]
        for j in range(1, t):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(t):
            e = np.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(t):
            y[i, j] *= inv
    return y


@njit(cache=True)
def softmax_bwd(y, gy):
    r, t = y.shape
    gx = np.empty((r, t), y.dtype)
    for i in range(r):
        dot = 0.0
        for j in range(t):
            dot += gy[i, j] * y[i, j]
        for j in range(t):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


@njit(cache=True)
def rowmask_softmax_fwd(x, row_mask):
    y = softmax_fwd(x)
    r, t = y.shape
    for i in range(r):
        if row_mask[i] <= 0:
            for j in range(t):
                y[i, j] = 0.0
    return y


@njit(cache=True)
def attn_softmax_fwd(scores, key_mask):
    b, h, q, t = scores.shape
    out = np.zeros((b, h, q, t), scores.dtype)
    for i in range(b):
        for j in range(h):
            for r in range(q):
                m = 0.0
                found = False
                for s in range(t):
                    if key_mask[i, s] > 0:
                        v = scores[i, j, r, s]
                        if not found or v > m:
                            m = v
                            found = True
                if not found:
                    continue
                ssum = 0.0
                for s in range(t):
                    if key_mask[i, s] > 0:
                        e = np.exp(scores[i, j, r, s] - m)
                        out[i, j, r, s] = e
                        ssum += e
                inv = 1.0 / ssum
                for s in range(t):
                    out[i, j, r, s] *= inv
    return out


@njit(cache=True)
def l2norm_fwd(x, eps):
    r, d = x.shape
    y = np.zeros((r, d), x.dtype)
    n = np.empty(r, x.dtype)
    for i in range(r):
        s = 0.0
        for j in range(d):
            s += x[i, j] * x[i, j]
        nv = np.sqrt(s)
        n[i] = nv
        if nv > eps:
            inv = 1.0 / nv
            for j in range(d):
                y[i, j] = x[i, j] * inv
    return y, n


@njit(cache=True)
def l2norm_bwd(y, norms, gy, eps):
    r, d = y.shape
    gx = np.zeros((r, d), y.dtype)
    for i in range(r):
        if norms[i] <= eps:
            continue
        dot = 0.0
        for j in range(d):
            dot += gy[i, j] * y[i, j]
        inv = 1.0 / norms[i]
        for j in range(d):
            gx[i, j] = (gy[i, j] - y[i, j] * dot) * inv
    return gx


@njit(cache=True)
def maskedmax_fwd(x, mask):
    b, t, d = x.shape
    vals = np.zeros((b, d), x.dtype)
    idx = np.zeros((b, d), np.int64)
    has = np.zeros(b, np.bool_)
    for i in range(b):
        first = -1
        for j in range(t):
            if mask[i, j] > 0:
                first = j
                break
        if first < 0:
            continue
        has[i] = True
        for c in range(d):
            vals[i, c] = x[i, first, c]
            idx[i, c] = first
        for j in range(first + 1, t):
            if mask[i, j] <= 0:
                continue
            for c in range(d):
                v = x[i, j, c]
                if v > vals[i, c]:
                    vals[i, c] = v
                    idx[i, c] = j
    return vals, idx, has


@njit(cache=True)
def maskedmax_bwd(idx, has, gvals, t_len):
    b, d = gvals.shape
    gx = np.zeros((b, t_len, d), gvals.dtype)
    for i in range(b):
        if not has[i]:
            continue
        for c in range(d):
            gx[i, idx[i, c], c] += gvals[i, c]
    return gx


@njit(cache=True)
def vlad_fwd(tokens, assign, anchors):
    b, m, c = tokens.shape
    k = assign.shape[2]
    raw = np.zeros((b, k, c), tokens.dtype)
    asum = np.zeros((b, k), tokens.dtype)
    for i in range(b):
        for j in range(m):
            for q in range(k):
                a = assign[i, j, q]
                if a == 0.0:
                    continue
                asum[i, q] += a
                for cc in range(c):
                    raw[i, q, cc] += a * tokens[i, j, cc]
        for q in range(k):
            s = asum[i, q]
            for cc in range(c):
                raw[i, q, cc] -= s * anchors[q, cc]
    return raw, asum


@njit(cache=True)
def vlad_bwd(tokens, assign, anchors, asum, graw):
    b, m, c = tokens.shape
    k = assign.shape[2]
    gtokens = np.zeros((b, m, c), tokens.dtype)
    gassign = np.zeros((b, m, k), tokens.dtype)
    ganchors = np.zeros((k, c), tokens.dtype)
    for i in range(b):
        for j in range(m):
            for q in range(k):
                a = assign[i, j, q]
                dot = 0.0
                for cc in range(c):
                    g = graw[i, q, cc]
                    gtokens[i, j, cc] += a * g
                    dot += (tokens[i, j, cc] - anchors[q, cc]) * g
                gassign[i, j, q] = dot
        for q in range(k):
            s = asum[i, q]
            for cc in range(c):
                ganchors[q, cc] -= s * graw[i, q, cc]
    return gtokens, gassign, ganchors


@njit(cache=True)
def layernorm_fwd(x, gain, bias, eps):
    r, d = x.shape
    y = np.empty((r, d), x.dtype)
    xhat = np.empty((r, d), x.dtype)
    inv_std = np.empty(r, x.dtype)
    for i in range(r):
        mu = 0.0
        for c in range(d):
            mu += x[i, c]
        mu /= d
        var = 0.0
        for c in range(d):
            dv = x[i, c] - mu
            var += dv * dv
        var /= d
        inv = 1.0 / np.sqrt(var + eps)
        inv_std[i] = inv
        for c in range(d):
            xh = (x[i, c] - mu) * inv
            xhat[i, c] = xh
            y[i, c] = xh * gain[c] + bias[c]
    return y, xhat, inv_std


@njit(cache=True)
def layernorm_bwd(xhat, inv_std, gain, gy):
    r, d = xhat.shape
    gx = np.empty((r, d), xhat.dtype)
    ggain = np.zeros(d, xhat.dtype)
    gbias = np.zeros(d, xhat.dtype)
    for i in range(r):
        mean_gh = 0.0
        mean_ghx = 0.0
        for c in range(d):
            gh = gy[i, c] * gain[c]
            ggain[c] += gy[i, c] * xhat[i, c]
            gbias[c] += gy[i, c]
            mean_gh += gh
            mean_ghx += gh * xhat[i, c]
        mean_gh /= d
        mean_ghx /= d
        for c in range(d):
            gh = gy[i, c] * gain[c]
            gx[i, c] = inv_std[i] * (gh - mean_gh - xhat[i, c] * mean_ghx)
    return gx, ggain, gbias
