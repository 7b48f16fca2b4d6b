"""The numba kernels must agree with the numpy reference bit-for-bit up to
floating point noise, including the masked/degenerate edge cases."""

import numpy as np
import pytest

from t2vlad import _kernels_numpy as knp
from t2vlad import backend

knb = pytest.importorskip("t2vlad._kernels_numba")


def pairs(name):
    return getattr(knp, name), getattr(knb, name)


def assert_same(a, b):
    if isinstance(a, tuple):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert_same(x, y)
    else:
        np.testing.assert_allclose(np.asarray(a, dtype=np.float64),
                                   np.asarray(b, dtype=np.float64), atol=1e-12)


def test_softmax_parity(rng):
    x = rng.normal(size=(40, 7)) * 5
    f_np, f_nb = pairs("softmax_fwd")
    assert_same(f_np(x), f_nb(x))
    y = f_np(x)
    gy = rng.normal(size=y.shape)
    b_np, b_nb = pairs("softmax_bwd")
    assert_same(b_np(y, gy), b_nb(y, gy))


def test_rowmask_softmax_parity(rng):
    x = rng.normal(size=(30, 5))
    m = (rng.random(30) > 0.3).astype(np.float64)
    m[:3] = 0.0  # a few fully masked rows
    f_np, f_nb = pairs("rowmask_softmax_fwd")
    a, b = f_np(x, m), f_nb(x, m)
    assert_same(a, b)
    assert np.all(a[:3] == 0.0)


def test_attn_softmax_parity_and_dead_rows(rng):
    scores = rng.normal(size=(3, 2, 6, 6)) * 3
    kmask = (rng.random((3, 6)) > 0.3).astype(np.float64)
    kmask[1] = 0.0  # item with no valid keys at all
    f_np, f_nb = pairs("attn_softmax_fwd")
    a, b = f_np(scores, kmask), f_nb(scores, kmask)
    assert_same(a, b)
    assert np.all(a[1] == 0.0)
    # rows over valid keys are proper distributions
    sums = a[0].sum(axis=-1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_l2norm_parity_zero_rows(rng):
    x = rng.normal(size=(20, 9))
    x[4] = 0.0
    x[7] = 1e-15
    f_np, f_nb = pairs("l2norm_fwd")
    (y1, n1), (y2, n2) = f_np(x, 1e-12), f_nb(x, 1e-12)
    assert_same((y1, n1), (y2, n2))
    assert np.all(y1[4] == 0.0) and np.all(y1[7] == 0.0)
    gy = rng.normal(size=x.shape)
    b_np, b_nb = pairs("l2norm_bwd")
    assert_same(b_np(y1, n1, gy, 1e-12), b_nb(y2, n2, gy, 1e-12))


def test_maskedmax_parity_ties(rng):
    x = rng.normal(size=(4, 6, 5))
    x[0, 1] = x[0, 3] = 7.0  # exact ties; first unmasked row must win
    mask = np.ones((4, 6))
    mask[0, 1] = 0.0  # tie at row 3 then wins for item 0
    mask[2] = 0.0     # fully masked item
    f_np, f_nb = pairs("maskedmax_fwd")
    (v1, i1, h1), (v2, i2, h2) = f_np(x, mask), f_nb(x, mask)
    assert_same(v1, v2)
    assert np.array_equal(i1, i2)
    assert np.array_equal(h1, np.asarray(h2, dtype=bool))
    assert np.all(i1[0] == 3)
    assert not h1[2] and np.all(v1[2] == 0.0)
    gv = rng.normal(size=v1.shape)
    b_np, b_nb = pairs("maskedmax_bwd")
    assert_same(b_np(i1, h1, gv, 6), b_nb(i2, h2, gv, 6))


def test_vlad_parity(rng):
    tokens = rng.normal(size=(5, 7, 6))
    assign = rng.random((5, 7, 4))
    anchors = rng.normal(size=(4, 6))
    f_np, f_nb = pairs("vlad_fwd")
    (r1, s1), (r2, s2) = f_np(tokens, assign, anchors), f_nb(tokens, assign, anchors)
    assert_same((r1, s1), (r2, s2))
    graw = rng.normal(size=r1.shape)
    b_np, b_nb = pairs("vlad_bwd")
    assert_same(b_np(tokens, assign, anchors, s1, graw),
                b_nb(tokens, assign, anchors, s2, graw))


def test_layernorm_parity(rng):
    x = rng.normal(size=(12, 10)) * 4 + 2
    gain = rng.normal(size=10)
    bias = rng.normal(size=10)
    f_np, f_nb = pairs("layernorm_fwd")
    (y1, h1, s1), (y2, h2, s2) = f_np(x, gain, bias, 1e-5), f_nb(x, gain, bias, 1e-5)
    assert_same((y1, h1, s1), (y2, h2, s2))
    gy = rng.normal(size=x.shape)
    b_np, b_nb = pairs("layernorm_bwd")
    assert_same(b_np(h1, s1, gain, gy), b_nb(h2, s2, gain, gy))


def test_backend_selection(monkeypatch):
    from t2vlad.errors import ConfigError
    initial = backend.active_backend()
    try:
        monkeypatch.setenv("T2VLAD_BACKEND", "numpy")
        backend._init_from_env()
        assert backend.active_backend() == "numpy"
        assert backend.kernels().BACKEND_NAME == "numpy"
        monkeypatch.setenv("T2VLAD_BACKEND", "numba")
        backend._init_from_env()
        assert backend.active_backend() == "numba"
        assert backend.kernels().BACKEND_NAME == "numba"
        monkeypatch.setenv("T2VLAD_BACKEND", "cuda")
        with pytest.raises(ConfigError):
            backend._init_from_env()
        with pytest.raises(ConfigError):
            backend.set_backend("tpu")
    finally:
        backend.set_backend(initial)
