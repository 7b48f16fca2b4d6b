"""Bidirectional retrieval metrics over a similarity matrix.

Ranks are pessimistic: the ground truth is placed after every item with an
equal score, so rank_q = #{j : S_qj >= S_q,gt}. Median rank uses the lower
median for even counts by default.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

RECALL_KS = (1, 5, 10, 50)


@dataclass
class RetrievalReport:
    direction: str
    r1: float
    r5: float
    r10: float
    r50: float
    mdr: float
    num_queries: int
    ranks: np.ndarray

    def to_dict(self):
        return {"direction": self.direction, "r1": self.r1, "r5": self.r5,
                "r10": self.r10, "r50": self.r50, "mdr": self.mdr,
                "num_queries": self.num_queries}


def _as_array(s):
    data = getattr(s, "data", s)
    return np.asarray(data, dtype=np.float64)


def ranks_from_similarity(s, direction="t2v"):
    """Per-query ground-truth ranks for a square matched matrix."""
    m = _as_array(s)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("expected a square similarity matrix, got %s" % (m.shape,))
    if direction == "v2t":
        m = m.T
    elif direction != "t2v":
        raise ConfigError("direction must be 't2v' or 'v2t', got %r" % (direction,))
    diag = np.diag(m)
    return (m >= diag[:, None]).sum(axis=1).astype(np.int64)


def ranks_caption_matrix(s, owner):
    """Ranks for a (captions x videos) matrix with multiple captions.

    owner[q] is the column of caption q's ground-truth video. Text-to-video
    treats every caption as one query; video-to-text scores each video by
    its best-ranked own caption. Returns (t2v ranks, v2t ranks).
    """
    m = _as_array(s)
    owner = np.asarray(owner, dtype=np.int64)
    if m.ndim != 2 or owner.shape != (m.shape[0],):
        raise ShapeError("matrix %s does not match %d owners" % (m.shape, owner.size))
    gt = m[np.arange(m.shape[0]), owner]
    t2v = (m >= gt[:, None]).sum(axis=1).astype(np.int64)
    v2t = np.empty(m.shape[1], dtype=np.int64)
    for v in range(m.shape[1]):
        qs = np.where(owner == v)[0]
        if qs.size == 0:
            raise ConfigError("video column %d has no ground-truth caption" % v)
        col = m[:, v]
        v2t[v] = min(int((col >= col[q]).sum()) for q in qs)
    return t2v, v2t


def median_rank(ranks, rule="lower"):
    ranks = np.sort(np.asarray(ranks))
    n = ranks.size
    if rule == "lower":
        return float(ranks[(n - 1) // 2])
    if rule == "upper":
        return float(ranks[n // 2])
    raise ConfigError("median rule must be 'lower' or 'upper', got %r" % (rule,))


def report_from_ranks(ranks, direction, median_rule="lower"):
    ranks = np.asarray(ranks)
    n = ranks.size
    rk = {k: 100.0 * float((ranks <= k).sum()) / n for k in RECALL_KS}
    return RetrievalReport(direction, rk[1], rk[5], rk[10], rk[50],
                           median_rank(ranks, median_rule), n, ranks)


def report(s, median_rule="lower"):
    """Both-direction reports for a square matched similarity matrix."""
    return (report_from_ranks(ranks_from_similarity(s, "t2v"), "t2v", median_rule),
            report_from_ranks(ranks_from_similarity(s, "v2t"), "v2t", median_rule))
