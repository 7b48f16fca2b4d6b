"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_kernels_numba`` with the same
signature; ``backend`` picks one of the two modules at import time.
"""

import numpy as np

BACKEND_NAME = "numpy"


def softmax_fwd(x):
    """Row-stabilized softmax over the last axis of a 2-D array."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def rowmask_softmax_fwd(x, row_mask):
    """Softmax over the last axis; rows with row_mask == 0 come back all-zero."""
    y = softmax_fwd(x)
    return y * (row_mask > 0).astype(x.dtype)[:, None]


def attn_softmax_fwd(scores, key_mask):
    """Softmax over keys for (B, H, Q, T) scores, excluding masked keys.

    Query rows that see no valid key are returned as zeros instead of NaN.
    """
    valid = (key_mask > 0)[:, None, None, :]
    neg = np.where(valid, scores, -np.inf)
    m = neg.max(axis=3, keepdims=True)
    # fully-masked rows have m == -inf; shift by 0 there to avoid inf - inf
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(valid, np.exp(neg - m), 0.0)
    s = e.sum(axis=3, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def l2norm_fwd(x, eps):
    """Normalize each row of a 2-D array; rows with norm <= eps map to zero."""
    n = np.sqrt((x * x).sum(axis=1))
    safe = np.where(n > eps, n, 1.0)
    y = x / safe[:, None]
    y[n <= eps] = 0.0
    return y, n


def l2norm_bwd(y, norms, gy, eps):
    dot = (gy * y).sum(axis=1, keepdims=True)
    safe = np.where(norms > eps, norms, 1.0)
    gx = (gy - y * dot) / safe[:, None]
    gx[norms <= eps] = 0.0
    return gx


def maskedmax_fwd(x, mask):
    """Columnwise max over unmasked rows of (B, T, D), first occurrence on ties.

    Returns (values, argmax index, any-unmasked flag); rows of items with no
    unmasked entries are zero with flag False.
    """
    b, t, d = x.shape
    vals = np.zeros((b, d), dtype=x.dtype)
    idx = np.zeros((b, d), dtype=np.int64)
    has = np.zeros(b, dtype=np.bool_)
    for i in range(b):
        rows = np.flatnonzero(mask[i] > 0)
        if rows.size == 0:
            continue
        has[i] = True
        sub = x[i, rows]
        j = sub.argmax(axis=0)  # first occurrence on ties
        idx[i] = rows[j]
        vals[i] = sub[j, np.arange(d)]
    return vals, idx, has


def maskedmax_bwd(idx, has, gvals, t_len):
    b, d = gvals.shape
    gx = np.zeros((b, t_len, d), dtype=gvals.dtype)
    cols = np.arange(d)
    for i in range(b):
        if has[i]:
            gx[i, idx[i], cols] += gvals[i]
    return gx


def vlad_fwd(tokens, assign, anchors):
    """Residual aggregation: raw[b,k] = sum_m a[b,m,k] * (z[b,m] - anchors[k])."""
    asum = assign.sum(axis=1)
    raw = np.matmul(assign.transpose(0, 2, 1), tokens) - asum[:, :, None] * anchors[None]
    return raw, asum


def vlad_bwd(tokens, assign, anchors, asum, graw):
    gtokens = np.matmul(assign, graw)
    # d/d assign[b,m,k] = dot(tokens[b,m] - anchors[k], graw[b,k])
    gassign = np.matmul(tokens, graw.transpose(0, 2, 1)) - (anchors[None] * graw).sum(axis=2)[:, None, :]
    ganchors = -(asum[:, :, None] * graw).sum(axis=0)
    return gtokens, gassign, ganchors


def layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def layernorm_bwd(xhat, inv_std, gain, gy):
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gh = gy * gain
    gx = inv_std[:, None] * (
        gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True)
    )
    return gx, ggain, gbias
