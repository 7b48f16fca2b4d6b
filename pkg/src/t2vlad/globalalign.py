"""Mixture-of-experts global similarity.

The flattened text descriptor drives both sides: per-expert projections
(K*C -> C, then self-gating) produce expert-specific global text features,
and a linear head produces mixture logits. Weights are a softmax over the
experts actually available for the video under comparison, so s_global is
always a convex combination of per-expert cosines; unavailable experts
carry zero vectors and weight 0.
"""

import math

import numpy as np

from . import graph as G
from .encoders import self_gating
from .errors import ConfigError, EmptyPoolError, ShapeError


class GlobalAlignParams:
    def __init__(self, experts, k, dim, rng):
        self.experts = list(experts)
        self.k = k
        self.dim = dim
        d_in = k * dim
        std = 1.0 / math.sqrt(d_in)
        self.proj_w, self.proj_b = {}, {}
        self.gate_w, self.gate_b = {}, {}
        for e in self.experts:
            self.proj_w[e.name] = G.Parameter(
                rng.normal(0.0, std, size=(d_in, dim)), "galign.proj.%s.w" % e.name)
            self.proj_b[e.name] = G.Parameter(np.zeros(dim), "galign.proj.%s.b" % e.name)
            self.gate_w[e.name] = G.Parameter(
                rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, dim)), "galign.gate.%s.w" % e.name)
            self.gate_b[e.name] = G.Parameter(np.zeros(dim), "galign.gate.%s.b" % e.name)
        self.weight_w = G.Parameter(
            rng.normal(0.0, std, size=(d_in, len(self.experts))), "galign.weight.w")
        self.weight_b = G.Parameter(np.zeros(len(self.experts)), "galign.weight.b")

    def parameters(self):
        out = []
        for e in self.experts:
            out += [self.proj_w[e.name], self.proj_b[e.name],
                    self.gate_w[e.name], self.gate_b[e.name]]
        return out + [self.weight_w, self.weight_b]


def _check_flat(params, gt_flat):
    want = params.k * params.dim
    if gt_flat.data.ndim != 2 or gt_flat.data.shape[1] != want:
        raise ShapeError("flattened text descriptor must be (B, %d), got %s"
                         % (want, gt_flat.data.shape))


def text_expert_projections(params, gt_flat):
    """Per-expert gated linear maps of the flattened text descriptor.

    gt_flat (B, K*C) -> list of N Tensors (B, C).
    """
    _check_flat(params, gt_flat)
    out = []
    for e in params.experts:
        proj = G.matmul(gt_flat, params.proj_w[e.name]) + params.proj_b[e.name]
        out.append(self_gating(proj, params.gate_w[e.name], params.gate_b[e.name]))
    return out


def mixture_logits(params, gt_flat):
    """Raw per-expert weight logits (B, N) before availability masking."""
    _check_flat(params, gt_flat)
    return G.matmul(gt_flat, params.weight_w) + params.weight_b


def mixture_weights(gt_flat, availability, params):
    """Softmax of the weight logits over the available experts only.

    gt_flat (B, K*C), availability (B, N) -> (B, N); unavailable experts get
    exactly 0, available rows sum to 1.
    """
    avail = np.asarray(availability, dtype=float)
    if avail.ndim == 1:
        avail = avail.reshape(1, -1)
    if np.any(avail.sum(axis=1) == 0):
        raise EmptyPoolError("mixture_weights: an item has no available expert")
    logits = mixture_logits(params, gt_flat)
    if logits.data.shape != avail.shape:
        raise ConfigError("availability shape %s does not match logits %s"
                          % (avail.shape, logits.data.shape))
    # Per-entry constant offset: available entries shift by the available
    # max (so the largest exponent is exactly 0), unavailable entries by
    # their own logit (exp(0)=1, finite, then zeroed by the mask). Keeps
    # both overflow and underflow out regardless of where the raw max sits;
    # gradients are exact because the offset is constant and the mask
    # already kills the unavailable path.
    masked = np.where(avail > 0, logits.data, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    offset = np.where(avail > 0, shift, logits.data)
    e = G.mul(G.exp(logits - G.Tensor(offset)), G.Tensor(avail))
    denom = G.sum_(e, axis=1, keepdims=True)
    return G.div(e, denom)


def global_similarity(ft, fv, w):
    """s_global = sum_i w_i cos(ft_i, fv_i) for one text-video pair.

    ft, fv: lists of (C,) or (1, C) Tensors; w: (N,) or (1, N) Tensor.
    Zero-vector pairs contribute exactly 0.
    """
    if len(ft) != len(fv):
        raise ShapeError("expert counts differ: %d vs %d" % (len(ft), len(fv)))
    terms = []
    for i, (a, b) in enumerate(zip(ft, fv)):
        an = G.l2_normalize_rows(G.reshape(a, 1, -1))
        bn = G.l2_normalize_rows(G.reshape(b, 1, -1))
        cos = G.sum_(G.mul(an, bn))
        terms.append(G.mul(cos, G.reshape(w, 1, -1)[0, i]))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return G.reshape(total, ())


def global_similarity_matrix(ft_list, fv_list, logits, avail):
    """All text-video global similarities at once.

    ft_list: N Tensors (Bt, C); fv_list: N Tensors (Bv, C) with zero rows
    for unavailable experts; logits (Bt, N); avail (Bv, N). Weights are
    renormalized per video over its available experts. Returns (Bt, Bv).
    """
    avail = np.asarray(avail, dtype=float)
    if np.any(avail.sum(axis=1) == 0):
        raise EmptyPoolError("global_similarity_matrix: a video has no available expert")
    ld = logits.data
    n = len(ft_list)
    # per-(text, video) shift = max logit among that video's experts, with
    # the same per-entry constant-offset scheme as mixture_weights
    shifts = (ld[:, None, :] + np.where(avail[None] > 0, 0.0, -np.inf)).max(axis=2)
    num = None
    denom = None
    for i in range(n):
        offset = np.where(avail[None, :, i] > 0, shifts, ld[:, i:i + 1])
        e_i = G.mul(G.exp(logits[:, i:i + 1] - G.Tensor(offset)),
                    G.Tensor(avail[None, :, i]))             # (Bt, Bv)
        tn = G.l2_normalize_rows(ft_list[i])
        vn = G.l2_normalize_rows(fv_list[i])
        cos = G.matmul(tn, G.transpose(vn))                  # (Bt, Bv)
        term = G.mul(cos, e_i)
        num = term if num is None else num + term
        denom = e_i if denom is None else denom + e_i
    return G.div(num, denom)
