"""Video and text encoders.

Video local path: per-expert linear projection of segment features into the
common C-dim space, concatenation in declared expert order (missing experts
contribute masked zero tokens so the token layout never changes), then one
multi-head self-attention layer over the concatenation.

Video global path: per expert, masked temporal max-pool, projection to C,
then self-gating y = u * sigmoid(W u + b). Unavailable experts yield zero
vectors.

Text path: precomputed contextual embeddings are projected d_text -> C by a
single linear layer; in token-id mode a toy embedder (table + one attention
layer) stands in for the upstream language model.
"""

import math

import numpy as np

from . import graph as G
from .errors import ConfigError, EmptyPoolError


def _linear_params(rng, d_in, d_out, name):
    std = 1.0 / math.sqrt(d_in)
    w = G.Parameter(rng.normal(0.0, std, size=(d_in, d_out)), name + ".w")
    b = G.Parameter(np.zeros(d_out), name + ".b")
    return w, b


def self_gating(u, w, b):
    """Context gating: elementwise recalibration u * sigmoid(u W + b)."""
    return G.mul(u, G.sigmoid(G.matmul(u, w) + b))


class VideoEncoderParams:
    def __init__(self, experts, dim, heads, rng, ffn_hidden=0):
        self.experts = list(experts)
        self.dim = dim
        self.heads = heads
        self.local_w, self.local_b = {}, {}
        self.glob_w, self.glob_b = {}, {}
        self.gate_w, self.gate_b = {}, {}
        for e in self.experts:
            self.local_w[e.name], self.local_b[e.name] = _linear_params(
                rng, e.dim, dim, "video.local.%s" % e.name)
            self.glob_w[e.name], self.glob_b[e.name] = _linear_params(
                rng, e.dim, dim, "video.global.%s" % e.name)
            self.gate_w[e.name], self.gate_b[e.name] = _linear_params(
                rng, dim, dim, "video.gate.%s" % e.name)
        self.attn = G.AttentionParams(dim, heads, rng, name="video.attn", ffn_hidden=ffn_hidden)

    def parameters(self):
        out = []
        for e in self.experts:
            out += [self.local_w[e.name], self.local_b[e.name],
                    self.glob_w[e.name], self.glob_b[e.name],
                    self.gate_w[e.name], self.gate_b[e.name]]
        return out + self.attn.parameters()


class TextEncoderParams:
    """Projection for precomputed embeddings, or table + attention for ids."""

    def __init__(self, text_dim, dim, heads, rng, vocab_size=0, ffn_hidden=0):
        self.text_dim = text_dim
        self.dim = dim
        self.heads = heads
        self.vocab_size = vocab_size
        if vocab_size > 0:
            std = 1.0 / math.sqrt(dim)
            self.table = G.Parameter(rng.normal(0.0, std, size=(vocab_size, dim)), "text.table")
            self.attn = G.AttentionParams(dim, heads, rng, name="text.attn", ffn_hidden=ffn_hidden)
            self.proj_w = self.proj_b = None
        else:
            self.table = None
            self.attn = None
            self.proj_w, self.proj_b = _linear_params(rng, text_dim, dim, "text.proj")

    def parameters(self):
        if self.vocab_size > 0:
            return [self.table] + self.attn.parameters()
        return [self.proj_w, self.proj_b]


def encode_video_local(params, video_batch, training=False, dropout_p=0.0, rng=None):
    """Project + concatenate expert segments, run self-attention.

    Returns (tokens Tensor (B, M_total, C), token mask (B, M_total) ndarray,
    provenance list of expert names per token slot). M_total is the sum of
    declared max_segments, independent of which experts are available.
    """
    pieces, masks, provenance = [], [], []
    b = len(video_batch.video_ids)
    for e in params.experts:
        feats = video_batch.features[e.name]
        if feats.shape[2] != e.dim:
            raise ConfigError("expert %r features have dim %d, params expect %d"
                              % (e.name, feats.shape[2], e.dim))
        msk = video_batch.masks[e.name]
        x = G.matmul(G.Tensor(feats), params.local_w[e.name]) + params.local_b[e.name]
        x = G.mul(x, G.Tensor(msk[:, :, None]))
        pieces.append(x)
        masks.append(msk)
        provenance += [e.name] * e.max_segments
    tokens = G.concat(pieces, axis=1)
    token_mask = np.concatenate(masks, axis=1)
    out = G.attention_block(tokens, token_mask, params.attn, params.heads,
                            dropout_p=dropout_p, rng=rng, training=training)
    return out, token_mask, provenance


def encode_video_global(params, video_batch):
    """Per-expert max-pool -> projection -> self-gating.

    Returns (list of N Tensors (B, C), avail (B, N) ndarray). Unavailable
    experts produce exact zero vectors. Raises if any item has no available
    expert at all.
    """
    avail = video_batch.avail
    dead = np.where(avail.sum(axis=1) == 0)[0]
    if dead.size:
        raise EmptyPoolError("item %r has no available expert"
                             % video_batch.video_ids[int(dead[0])])
    feats_out = []
    for n_i, e in enumerate(params.experts):
        feats = video_batch.features[e.name]
        pooled, _has = G.masked_max_batch(G.Tensor(feats), video_batch.masks[e.name])
        proj = G.matmul(pooled, params.glob_w[e.name]) + params.glob_b[e.name]
        gated = self_gating(proj, params.gate_w[e.name], params.gate_b[e.name])
        col = avail[:, n_i:n_i + 1]
        feats_out.append(G.mul(gated, G.Tensor(col)))
    return feats_out, avail


def encode_text(params, text_batch, training=False, dropout_p=0.0, rng=None):
    """Map captions to token features in the common space.

    Returns (tokens Tensor (B, T, C), mask (B, T) ndarray). Precomputed
    embeddings go through the linear projection; token ids go through the
    toy embedder (table lookup + one attention layer). Masked positions are
    exactly zero either way.
    """
    mask = text_batch.mask
    if text_batch.token_mode:
        if params.vocab_size == 0:
            raise ConfigError("dataset provides token ids but params have no embedding table")
        ids = text_batch.tokens
        if ids.max(initial=0) >= params.vocab_size:
            raise ConfigError("token id %d outside vocab of size %d"
                              % (int(ids.max()), params.vocab_size))
        b, t = ids.shape
        emb = G.reshape(G.gather_rows(params.table, ids.reshape(-1)), b, t, params.dim)
        emb = G.mul(emb, G.Tensor(mask[:, :, None]))
        out = G.attention_block(emb, mask, params.attn, params.heads,
                                dropout_p=dropout_p, rng=rng, training=training)
        return out, mask
    feats = text_batch.tokens
    if feats.shape[2] != params.text_dim:
        raise ConfigError("text features have dim %d, params expect %d"
                          % (feats.shape[2], params.text_dim))
    x = G.matmul(G.Tensor(feats), params.proj_w) + params.proj_b
    x = G.mul(x, G.Tensor(mask[:, :, None]))
    return x, mask
