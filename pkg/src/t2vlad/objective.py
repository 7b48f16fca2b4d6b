"""Combined similarity matrix and bidirectional max-margin ranking loss."""

import numpy as np

from . import graph as G
from .errors import ConfigError, ContractError, ShapeError


def batch_similarity(batch, model, training=False, rng=None):
    """All B x B combined similarities for a matched batch.

    Row i is text i, column j is video j; the diagonal holds the ground
    truth pairs. Each caption and video is encoded exactly once.
    """
    if batch.size < 2:
        raise ContractError("batch_similarity needs at least 2 pairs, got %d" % batch.size)
    return model.similarity_parts(batch.text, batch.video, training=training, rng=rng)


def margin_ranking_loss(s, margin):
    """L = (1/B) sum_i sum_{j != i} [max(0, m + S_ij - S_ii)
                                     + max(0, m + S_ji - S_ii)]."""
    if margin <= 0:
        raise ConfigError("margin must be positive, got %r" % (margin,))
    if s.data.ndim != 2 or s.data.shape[0] != s.data.shape[1]:
        raise ShapeError("similarity matrix must be square, got %s" % (s.data.shape,))
    b = s.data.shape[0]
    if b < 2:
        raise ContractError("ranking loss needs at least 2 pairs, got %d" % b)
    eye = np.eye(b)
    diag_col = G.sum_(G.mul(s, G.Tensor(eye)), axis=1, keepdims=True)
    t2v = G.relu(s - diag_col + margin)
    v2t = G.relu(G.transpose(s) - diag_col + margin)
    off = G.Tensor(1.0 - eye)
    return G.mul(G.sum_(G.mul(t2v + v2t, off)), 1.0 / b)
