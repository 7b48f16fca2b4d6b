"""Mixture-of-experts global similarity against scalar-loop oracles."""

import numpy as np
import pytest

from t2vlad import globalalign as GA
from t2vlad import graph as G
from t2vlad.data import ExpertSpec
from t2vlad.errors import EmptyPoolError, ShapeError


def make_params(rng, n=3, k=2, dim=4):
    specs = [ExpertSpec("e%d" % i, 5, 4) for i in range(n)]
    return GA.GlobalAlignParams(specs, k, dim, np.random.default_rng(rng.integers(2**32)))


def oracle_weights(logits, avail):
    """Reduced softmax over the available subset, independent code path."""
    out = np.zeros_like(logits)
    for b in range(logits.shape[0]):
        idx = np.flatnonzero(avail[b])
        e = np.exp(logits[b, idx] - logits[b, idx].max())
        out[b, idx] = e / e.sum()
    return out


def test_mixture_weights_match_reduced_softmax(rng):
    params = make_params(rng)
    gt = G.Tensor(rng.normal(size=(5, 8)))
    avail = (rng.random((5, 3)) > 0.4).astype(np.float64)
    avail[avail.sum(axis=1) == 0, 0] = 1.0
    w = GA.mixture_weights(gt, avail, params)
    logits = GA.mixture_logits(params, gt).data
    np.testing.assert_allclose(w.data, oracle_weights(logits, avail), atol=1e-12)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w.data[avail == 0] == 0.0)


def test_mixture_weights_all_available_is_plain_softmax(rng):
    params = make_params(rng)
    gt = G.Tensor(rng.normal(size=(2, 8)))
    w = GA.mixture_weights(gt, np.ones((2, 3)), params)
    s = G.softmax_rows(GA.mixture_logits(params, gt))
    np.testing.assert_allclose(w.data, s.data, atol=1e-12)


def test_mixture_weights_huge_unavailable_logit_is_harmless(rng):
    """An extreme logit on an unavailable expert must not overflow."""
    params = make_params(rng)
    params.weight_b.data[:] = [900.0, 0.0, 0.0]  # expert 0 dominates raw logits
    gt = G.Tensor(np.zeros((1, 8)))
    avail = np.array([[0.0, 1.0, 1.0]])
    w = GA.mixture_weights(gt, avail, params)
    assert np.all(np.isfinite(w.data))
    assert w.data[0, 0] == 0.0
    np.testing.assert_allclose(w.data.sum(), 1.0, atol=1e-12)


def test_mixture_weights_no_expert_raises(rng):
    params = make_params(rng)
    with pytest.raises(EmptyPoolError):
        GA.mixture_weights(G.Tensor(np.zeros((1, 8))), np.zeros((1, 3)), params)


def test_mixture_weights_shape_guard(rng):
    params = make_params(rng)
    with pytest.raises(ShapeError):
        GA.mixture_weights(G.Tensor(np.zeros((1, 9))), np.ones((1, 3)), params)


def test_global_similarity_scalar_oracle(rng):
    params = make_params(rng)
    gt = G.Tensor(rng.normal(size=(1, 8)))
    ft = GA.text_expert_projections(params, gt)
    fv = [G.Tensor(rng.normal(size=(1, 4))) for _ in range(3)]
    avail = np.array([[1.0, 1.0, 1.0]])
    w = GA.mixture_weights(gt, avail, params)
    s = GA.global_similarity(ft, fv, G.reshape(w, 3))
    expected = 0.0
    for i in range(3):
        a, b = ft[i].data[0], fv[i].data[0]
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        expected += w.data[0, i] * cos
    np.testing.assert_allclose(float(s.data), expected, atol=1e-12)
    assert -1 - 1e-12 <= float(s.data) <= 1 + 1e-12  # convex combination


def test_global_similarity_zero_expert_contributes_zero(rng):
    params = make_params(rng)
    gt = G.Tensor(rng.normal(size=(1, 8)))
    ft = GA.text_expert_projections(params, gt)
    fv = [G.Tensor(rng.normal(size=(1, 4))) for _ in range(3)]
    fv[1] = G.Tensor(np.zeros((1, 4)))  # unavailable -> zero vector
    avail = np.array([[1.0, 0.0, 1.0]])
    w = GA.mixture_weights(gt, avail, params)
    s = GA.global_similarity(ft, fv, G.reshape(w, 3))
    # recompute dropping expert 1 entirely
    expected = 0.0
    for i in (0, 2):
        a, b = ft[i].data[0], fv[i].data[0]
        expected += w.data[0, i] * (a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    np.testing.assert_allclose(float(s.data), expected, atol=1e-12)


def test_matrix_extreme_logits_stay_finite(rng):
    """Underflow case: the argmax expert is missing for one video and the
    remaining logits are hundreds of nats below it."""
    params = make_params(rng)
    params.weight_b.data[:] = [900.0, 0.0, -5.0]
    gt = G.Tensor(np.zeros((2, 8)))
    for w in params.proj_w.values():
        w.data[:] = 0.0
    avail = np.array([[0.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
    fv = [G.Tensor(rng.normal(size=(2, 4)) * avail[:, i:i + 1]) for i in range(3)]
    ft = [G.Tensor(rng.normal(size=(2, 4))) for _ in range(3)]
    mat = GA.global_similarity_matrix(ft, fv, GA.mixture_logits(params, gt), avail)
    assert np.all(np.isfinite(mat.data))
    # video 0 lacks expert 0, so its weights renormalize over experts 1, 2
    w0 = GA.mixture_weights(G.Tensor(np.zeros((1, 8))), avail[0:1], params)
    expected = 0.0
    for i in (1, 2):
        a, b = ft[i].data[0], fv[i].data[0]
        expected += w0.data[0, i] * (a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    np.testing.assert_allclose(mat.data[0, 0], expected, atol=1e-12)


def test_global_similarity_matrix_matches_pairwise(rng):
    params = make_params(rng)
    bt, bv, n = 4, 3, 3
    gt = G.Tensor(rng.normal(size=(bt, 8)))
    ft = GA.text_expert_projections(params, gt)
    avail = (rng.random((bv, n)) > 0.3).astype(np.float64)
    avail[avail.sum(axis=1) == 0, 0] = 1.0
    fv = [G.Tensor(rng.normal(size=(bv, 4)) * avail[:, i:i + 1]) for i in range(n)]
    logits = GA.mixture_logits(params, gt)
    mat = GA.global_similarity_matrix(ft, fv, logits, avail)
    assert mat.data.shape == (bt, bv)
    for ti in range(bt):
        for vj in range(bv):
            w = GA.mixture_weights(G.Tensor(gt.data[ti:ti + 1]),
                                   avail[vj:vj + 1], params)
            fts = [G.Tensor(f.data[ti:ti + 1]) for f in ft]
            fvs = [G.Tensor(f.data[vj:vj + 1]) for f in fv]
            s = GA.global_similarity(fts, fvs, G.reshape(w, n))
            np.testing.assert_allclose(mat.data[ti, vj], float(s.data), atol=1e-12)


def test_matrix_gradient_flows_and_is_finite(rng):
    params = make_params(rng)
    gt = G.Parameter(rng.normal(size=(2, 8)), "gt")
    ft = GA.text_expert_projections(params, gt)
    avail = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    fv = [G.Tensor(rng.normal(size=(2, 4)) * avail[:, i:i + 1]) for i in range(3)]
    mat = GA.global_similarity_matrix(ft, fv, GA.mixture_logits(params, gt), avail)
    G.zero_grads([gt] + params.parameters())
    G.backward(mat.sum())
    assert np.all(np.isfinite(gt.grad))
    assert np.any(gt.grad != 0.0)
