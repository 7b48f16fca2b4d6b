"""Shared-center VLAD aggregation and the local similarity.

K semantic centers plus one background center. Soft assignments come from a
softmax over token-center dot products with a learnable bias; residuals are
taken against separate anchor vectors and summed per center. The background
center takes part in the softmax (it soaks up assignment mass) but its
aggregated residual is discarded, so its anchor never receives gradient.
One code path serves text and video; sharing or splitting the centers is a
wiring choice made by the model.
"""

import csv
import io

import numpy as np

from . import graph as G
from .errors import ConfigError, EmptyPoolError


class SharedCenters:
    def __init__(self, k, dim, rng, name="vlad"):
        if k < 1:
            raise ConfigError("need at least 1 semantic center, got %d" % k)
        self.k = k
        self.dim = dim
        std = 1.0 / np.sqrt(dim)
        self.centers = G.Parameter(rng.normal(0.0, std, size=(k + 1, dim)), name + ".centers")
        self.anchors = G.Parameter(rng.normal(0.0, std, size=(k + 1, dim)), name + ".anchors")
        self.bias = G.Parameter(np.zeros(k + 1), name + ".bias")

    def parameters(self):
        return [self.centers, self.anchors, self.bias]


def assign_batch(centers, tokens, mask):
    """Soft assignments (B, M, K+1); masked token rows are all zero."""
    b, m, c = tokens.data.shape
    if c != centers.dim:
        raise ConfigError("token dim %d does not match center dim %d" % (c, centers.dim))
    logits = G.matmul(tokens, G.transpose(centers.centers)) + centers.bias
    flat = G.reshape(logits, b * m, centers.k + 1)
    a = G.rowmask_softmax(flat, np.asarray(mask).reshape(-1))
    return G.reshape(a, b, m, centers.k + 1)


def assign(tokens, mask, centers):
    """Single-item assignments: (M, C) tokens -> (M, K+1)."""
    m, c = tokens.data.shape
    a = assign_batch(centers, G.reshape(tokens, 1, m, c), np.asarray(mask).reshape(1, m))
    return G.reshape(a, m, centers.k + 1)


def aggregate_batch(centers, tokens, mask):
    """Per-center normalized residual descriptors (B, K, C).

    g_j = normalize(sum_i a_ij (z_i - anchor_j)) for the K semantic centers;
    the background center's aggregate is dropped before it is ever formed.
    """
    msk = np.asarray(mask)
    dead = np.where(msk.sum(axis=1) == 0)[0]
    if dead.size:
        raise EmptyPoolError("item %d has every token masked" % int(dead[0]))
    a = assign_batch(centers, tokens, msk)
    a_sem = a[:, :, :centers.k]
    anchors_sem = centers.anchors[:centers.k]
    raw = G.vlad_aggregate_raw(tokens, a_sem, anchors_sem)
    return G.l2_normalize_rows(raw)


def aggregate(tokens, mask, centers):
    """Single-item descriptor: (M, C) tokens -> (K, C)."""
    m, c = tokens.data.shape
    out = aggregate_batch(centers, G.reshape(tokens, 1, m, c), np.asarray(mask).reshape(1, m))
    return G.reshape(out, centers.k, c)


def local_similarity(gv, gt):
    """Cosine of the flattened descriptors; 0 when either side is all zero."""
    if gv.data.shape != gt.data.shape:
        raise ConfigError("descriptor shapes differ: %s vs %s" % (gv.data.shape, gt.data.shape))
    n = int(np.prod(gv.data.shape))
    a = G.l2_normalize_rows(G.reshape(gv, 1, n))
    b = G.l2_normalize_rows(G.reshape(gt, 1, n))
    return G.reshape(G.sum_(G.mul(a, b)), ())


def local_similarity_matrix(gt_flat, gv_flat):
    """(Bt, K*C) text x (Bv, K*C) video flats -> (Bt, Bv) cosines."""
    t = G.l2_normalize_rows(gt_flat)
    v = G.l2_normalize_rows(gv_flat)
    return G.matmul(t, G.transpose(v))


def export_assignments(tokens, mask, centers, labels):
    """CSV of assignment weights for unmasked tokens over all K+1 centers.

    Header ``label,center,weight``; weights reproduce assign() exactly
    (float repr round-trips).
    """
    msk = np.asarray(mask)
    if len(labels) != msk.shape[0]:
        raise ConfigError("got %d labels for %d tokens" % (len(labels), msk.shape[0]))
    a = assign(tokens, msk, centers).data
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "center", "weight"])
    for i in range(msk.shape[0]):
        if msk[i] <= 0:
            continue
        for j in range(centers.k + 1):
            w.writerow([labels[i], j, repr(float(a[i, j]))])
    return buf.getvalue()
