"""Reverse-mode autodiff on dense numpy arrays.

Covers exactly the op set the model needs: broadcasting arithmetic, matmul,
reductions, reshaping, a handful of fused kernels (softmax rows, key-masked
attention softmax, row l2-normalization, masked max, VLAD residual
aggregation, layer norm) and one-layer multi-head self-attention built from
those pieces.

Gradients flow through a per-call accumulation dict and are only persisted
on leaf tensors, so calling ``backward`` twice adds exactly twice the
gradient to every Parameter. Intermediate nodes never keep ``.grad``.
"""

import math
import os

import numpy as np

from . import backend
from .errors import ConfigError, ContractError, EmptyPoolError, NumericalError, ShapeError

_DEFAULT_DTYPE = np.float64
_DEBUG = os.environ.get("T2VLAD_DEBUG", "") not in ("", "0")


def set_default_dtype(dtype):
    """Set the dtype used for tensors created from raw python/numpy data."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError("default dtype must be float32 or float64, got %s" % dt)
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug(flag):
    """Toggle post-op finiteness assertions."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """A node in the computation graph.

    Leaves are built from raw data; internal nodes are produced by the op
    functions below and carry a backward closure mapping the upstream
    gradient to per-parent contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_needs", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        if isinstance(data, np.ndarray) and data.dtype.type in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op
        if self._parents:
            self._needs = any(p._needs for p in self._parents)
        else:
            self._needs = self.requires_grad
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite values after op %r" % _op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%s, op=%s)" % (self.data.shape, self._op)

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __pow__(self, e):
        return powi(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def detach(self):
        out = Tensor(self.data, _op="detach")
        return out


class Parameter(Tensor):
    """Named trainable leaf with an eagerly allocated gradient accumulator."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name):
        super().__init__(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, _op="param")
        self.name = name
        self.trainable = True
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return "Parameter(%s, shape=%s)" % (self.name, self.data.shape)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data, parents, bwd, op):
    out = Tensor(data, _parents=parents, _op=op)
    if out._needs:
        out._backward = bwd
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _contig(a):
    return np.ascontiguousarray(a)


# ----- elementwise and arithmetic ops -----


def add(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    b = _coerce(b, a)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a = _coerce(a, b) if not isinstance(a, Tensor) else a
    b = _coerce(b, a)

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b):
    b = _coerce(b, a)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ((a, ga), (b, gb))

    return _make(a.data / b.data, (a, b), bwd, "div")


def neg(a):
    def bwd(g):
        return ((a, -g),)

    return _make(-a.data, (a,), bwd, "neg")


def powi(a, e):
    e = float(e)

    def bwd(g):
        return ((a, g * e * a.data ** (e - 1.0)),)

    return _make(a.data ** e, (a,), bwd, "pow")


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        return ((a, g * out_data),)

    return _make(out_data, (a,), bwd, "exp")


def log(a):
    def bwd(g):
        return ((a, g / a.data),)

    return _make(np.log(a.data), (a,), bwd, "log")


def relu(a):
    def bwd(g):
        return ((a, g * (a.data > 0)),)

    return _make(np.maximum(a.data, 0.0), (a,), bwd, "relu")


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    return _make(out_data, (a,), bwd, "sigmoid")


# ----- reductions and shape ops -----


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    ax = axis if isinstance(axis, tuple) else (axis,)
    ax = tuple(a % len(shape) for a in ax)
    if not keepdims:
        ns = list(np.shape(g))
        for a in sorted(ax):
            ns.insert(a, 1)
        g = g.reshape(ns)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    def bwd(g):
        return ((a, _expand_reduced(g, a.data.shape, axis, keepdims)),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for d in ax:
            count *= a.data.shape[d]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.data.shape

    def bwd(g):
        return ((a, g.reshape(orig)),)

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = None
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return ((a, np.transpose(g, inv)),)

    return _make(np.transpose(a.data, axes), (a,), bwd, "transpose")


def take(a, key):
    """Basic (slice/int/tuple) indexing with scatter-back gradient."""

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return ((a, z),)

    return _make(a.data[key], (a,), bwd, "take")


def gather_rows(a, index):
    """Select rows along axis 0 by an integer array; duplicates accumulate."""
    index = np.asarray(index, dtype=np.int64)

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return ((a, z),)

    return _make(a.data[index], (a,), bwd, "gather_rows")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(zip(tensors, pieces))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            "matmul requires operands with ndim >= 2, got %dD and %dD" % (a.data.ndim, b.data.ndim)
        )

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.data.shape)), (b, _unbroadcast(gb, b.data.shape)))

    return _make(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def dropout(a, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout probability must be in [0, 1), got %r" % (p,))
    if not training or p == 0.0:
        return a
    keep = 1.0 - p
    mask = (rng.random(a.data.shape) < keep).astype(a.data.dtype) / keep

    def bwd(g):
        return ((a, g * mask),)

    return _make(a.data * mask, (a,), bwd, "dropout")


# ----- kernel-backed ops -----


def softmax_rows(a):
    """Row-stabilized softmax over the last axis of a 2D tensor."""
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2D tensor, got %dD" % a.data.ndim)
    k = backend.kernels()
    y = k.softmax_fwd(_contig(a.data))

    def bwd(g):
        return ((a, k.softmax_bwd(y, _contig(g))),)

    return _make(y, (a,), bwd, "softmax_rows")


def rowmask_softmax(a, row_mask):
    """Softmax per row; rows whose mask entry is 0 come back as all zeros."""
    if a.data.ndim != 2:
        raise ShapeError("rowmask_softmax expects a 2D tensor, got %dD" % a.data.ndim)
    rm = np.ascontiguousarray(np.asarray(row_mask, dtype=a.data.dtype))
    if rm.shape != (a.data.shape[0],):
        raise ShapeError("row mask shape %s does not match %d rows" % (rm.shape, a.data.shape[0]))
    k = backend.kernels()
    y = k.rowmask_softmax_fwd(_contig(a.data), rm)

    def bwd(g):
        return ((a, k.softmax_bwd(y, _contig(g))),)

    return _make(y, (a,), bwd, "rowmask_softmax")


def attn_softmax(scores, key_mask):
    """Softmax over keys of (B,H,Q,T) scores; masked keys get weight 0.

    A row with no valid key comes back as zeros rather than NaN.
    """
    if scores.data.ndim != 4:
        raise ShapeError("attn_softmax expects a 4D tensor, got %dD" % scores.data.ndim)
    km = np.ascontiguousarray(np.asarray(key_mask, dtype=scores.data.dtype))
    b, h, q, t = scores.data.shape
    if km.shape != (b, t):
        raise ShapeError("key mask shape %s does not match (%d, %d)" % (km.shape, b, t))
    k = backend.kernels()
    y = k.attn_softmax_fwd(_contig(scores.data), km)

    def bwd(g):
        g2 = _contig(g).reshape(b * h * q, t)
        gx = k.softmax_bwd(_contig(y).reshape(b * h * q, t), g2)
        return ((scores, gx.reshape(b, h, q, t)),)

    return _make(y, (scores,), bwd, "attn_softmax")


def l2_normalize_rows(a, eps=1e-12):
    """Normalize along the last axis; rows with norm <= eps map to zeros."""
    if eps <= 0:
        raise ConfigError("eps must be positive, got %r" % (eps,))
    shape = a.data.shape
    if len(shape) < 1:
        raise ShapeError("l2_normalize_rows needs at least 1 axis")
    d = shape[-1]
    x2 = _contig(a.data).reshape(-1, d)
    k = backend.kernels()
    y2, norms = k.l2norm_fwd(x2, float(eps))

    def bwd(g):
        gx = k.l2norm_bwd(y2, norms, _contig(g).reshape(-1, d), float(eps))
        return ((a, gx.reshape(shape)),)

    return _make(y2.reshape(shape), (a,), bwd, "l2_normalize_rows")


def masked_max_batch(a, mask):
    """Columnwise max over unmasked rows of (B,T,D).

    Returns (values Tensor of (B,D), has ndarray of (B,)). Items with no
    unmasked row yield zero rows and has=False; gradient routes to the
    first-occurring argmax row per column.
    """
    if a.data.ndim != 3:
        raise ShapeError("masked_max_batch expects a 3D tensor, got %dD" % a.data.ndim)
    m = np.ascontiguousarray(np.asarray(mask, dtype=a.data.dtype))
    b, t, d = a.data.shape
    if m.shape != (b, t):
        raise ShapeError("mask shape %s does not match (%d, %d)" % (m.shape, b, t))
    k = backend.kernels()
    vals, idx, has = k.maskedmax_fwd(_contig(a.data), m)

    def bwd(g):
        return ((a, k.maskedmax_bwd(idx, has, _contig(g), t)),)

    return _make(vals, (a,), bwd, "masked_max"), has


def masked_max_rows(a, mask):
    """Max over unmasked rows of (T,D) -> (D,); raises if all rows masked."""
    if a.data.ndim != 2:
        raise ShapeError("masked_max_rows expects a 2D tensor, got %dD" % a.data.ndim)
    t, d = a.data.shape
    m = np.asarray(mask)
    if m.shape != (t,):
        raise ShapeError("mask shape %s does not match %d rows" % (m.shape, t))
    out, has = masked_max_batch(reshape(a, 1, t, d), m.reshape(1, t))
    if not has[0]:
        raise EmptyPoolError("masked_max_rows: every row is masked out")
    return reshape(out, d)


def layer_norm(a, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learnable gain/bias."""
    shape = a.data.shape
    d = shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must have shape (%d,)" % d)
    x2 = _contig(a.data).reshape(-1, d)
    k = backend.kernels()
    y2, xhat, inv_std = k.layernorm_fwd(x2, _contig(gain.data), _contig(bias.data), float(eps))

    def bwd(g):
        gx, ggain, gbias = k.layernorm_bwd(xhat, inv_std, _contig(gain.data), _contig(g).reshape(-1, d))
        return ((a, gx.reshape(shape)), (gain, ggain), (bias, gbias))

    return _make(y2.reshape(shape), (a, gain, bias), bwd, "layer_norm")


def vlad_aggregate_raw(tokens, assign, anchors):
    """Unnormalized VLAD residual aggregation.

    tokens (B,M,C), assign (B,M,K), anchors (K,C) ->
    raw[b,k] = sum_m assign[b,m,k] * (tokens[b,m] - anchors[k]).
    Pass anchors pre-sliced to the centers that should receive gradient.
    """
    if tokens.data.ndim != 3 or assign.data.ndim != 3 or anchors.data.ndim != 2:
        raise ShapeError("vlad_aggregate_raw expects (B,M,C), (B,M,K), (K,C)")
    b, m, c = tokens.data.shape
    kk = assign.data.shape[2]
    if assign.data.shape[:2] != (b, m):
        raise ShapeError("assign shape %s does not match tokens %s" % (assign.data.shape, tokens.data.shape))
    if anchors.data.shape != (kk, c):
        raise ShapeError("anchors shape %s does not match (%d, %d)" % (anchors.data.shape, kk, c))
    k = backend.kernels()
    td, ad, cd = _contig(tokens.data), _contig(assign.data), _contig(anchors.data)
    raw, asum = k.vlad_fwd(td, ad, cd)

    def bwd(g):
        gt, ga, gc = k.vlad_bwd(td, ad, cd, asum, _contig(g))
        return ((tokens, gt), (assign, ga), (anchors, gc))

    return _make(raw, (tokens, assign, anchors), bwd, "vlad_aggregate")


# ----- multi-head self-attention -----


class AttentionParams:
    """Weights of one self-attention layer (projections + post-LN).

    ffn_hidden > 0 adds an optional position-wise feed-forward sublayer
    (two linears + relu, its own residual and layer norm); default is none.
    """

    def __init__(self, dim, heads, rng, name="attn", ffn_hidden=0):
        if dim % heads != 0:
            raise ConfigError("attention dim %d not divisible by %d heads" % (dim, heads))
        self.dim = dim
        self.heads = heads
        self.ffn_hidden = ffn_hidden
        std = 1.0 / math.sqrt(dim)
        def w(tag):
            return Parameter(rng.normal(0.0, std, size=(dim, dim)), "%s.%s" % (name, tag))
        def b(tag):
            return Parameter(np.zeros(dim), "%s.%s" % (name, tag))
        self.wq, self.bq = w("wq"), b("bq")
        self.wk, self.bk = w("wk"), b("bk")
        self.wv, self.bv = w("wv"), b("bv")
        self.wo, self.bo = w("wo"), b("bo")
        self.ln_gain = Parameter(np.ones(dim), name + ".ln_gain")
        self.ln_bias = Parameter(np.zeros(dim), name + ".ln_bias")
        if ffn_hidden > 0:
            self.ffn_w1 = Parameter(rng.normal(0.0, std, size=(dim, ffn_hidden)), name + ".ffn_w1")
            self.ffn_b1 = Parameter(np.zeros(ffn_hidden), name + ".ffn_b1")
            self.ffn_w2 = Parameter(rng.normal(0.0, 1.0 / math.sqrt(ffn_hidden),
                                               size=(ffn_hidden, dim)), name + ".ffn_w2")
            self.ffn_b2 = Parameter(np.zeros(dim), name + ".ffn_b2")
            self.ln2_gain = Parameter(np.ones(dim), name + ".ln2_gain")
            self.ln2_bias = Parameter(np.zeros(dim), name + ".ln2_bias")

    def parameters(self):
        out = [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
               self.wo, self.bo, self.ln_gain, self.ln_bias]
        if self.ffn_hidden > 0:
            out += [self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
                    self.ln2_gain, self.ln2_bias]
        return out


def _split_heads(t, b, n, h, hd):
    return transpose(reshape(t, b, n, h, hd), (0, 2, 1, 3))


def attention_core(x, key_mask, params, heads, dropout_p=0.0, rng=None, training=False):
    """Scaled dot-product self-attention over (B,T,C), no residual/LN.

    Masked keys receive zero weight; query rows with no valid key come out
    as zeros. Query rows at masked positions still produce values and must
    be zeroed by the caller if needed.
    """
    b, n, c = x.data.shape
    if c % heads != 0:
        raise ConfigError("attention dim %d not divisible by %d heads" % (c, heads))
    hd = c // heads
    q = _split_heads(matmul(x, params.wq) + params.bq, b, n, heads, hd)
    k = _split_heads(matmul(x, params.wk) + params.bk, b, n, heads, hd)
    v = _split_heads(matmul(x, params.wv) + params.bv, b, n, heads, hd)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    probs = attn_softmax(scores, key_mask)
    probs = dropout(probs, dropout_p, rng, training)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), b, n, c)
    return matmul(ctx, params.wo) + params.bo


def attention_block(x, key_mask, params, heads, dropout_p=0.0, rng=None, training=False):
    """Attention core + residual + layer norm, with masked rows zeroed."""
    core = attention_core(x, key_mask, params, heads, dropout_p, rng, training)
    y = layer_norm(add(x, core), params.ln_gain, params.ln_bias)
    if params.ffn_hidden > 0:
        h = relu(matmul(y, params.ffn_w1) + params.ffn_b1)
        h = dropout(h, dropout_p, rng, training)
        y = layer_norm(add(y, matmul(h, params.ffn_w2) + params.ffn_b2),
                       params.ln2_gain, params.ln2_bias)
    km = np.asarray(key_mask, dtype=x.data.dtype)
    return mul(y, Tensor(km[:, :, None]))


def multi_head_self_attention(x, mask, params, heads, dropout_p=0.0, training=False, rng=None):
    """Single-item self-attention: (M,C) tokens and an (M,) key mask.

    Returns the attention output (value mixing + output projection) for all
    M positions. With one unmasked token the output is exactly that token's
    value-projection path.
    """
    if x.data.ndim != 2:
        raise ShapeError("multi_head_self_attention expects (M,C), got %dD" % x.data.ndim)
    m, c = x.data.shape
    mask = np.asarray(mask)
    if mask.shape != (m,):
        raise ShapeError("mask shape %s does not match %d tokens" % (mask.shape, m))
    out = attention_core(reshape(x, 1, m, c), mask.reshape(1, m), params, heads,
                         dropout_p=dropout_p, rng=rng, training=training)
    return reshape(out, m, c)


# ----- backward engine -----


def _toposort(root):
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._needs:
                stack.append((p, False))
    return topo


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable grad-requiring leaf."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss, got shape %s" % (loss.data.shape,))
    if not loss._needs:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            for parent, pg in node._backward(g):
                if not parent._needs:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


def zero_grads(params):
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


def finite_difference_check(f, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values; relative error per entry is |analytic - fd| / max(1, |analytic|).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigError("finite-difference step h=%g outside [1e-7, 1e-3]" % h)
    params = list(params)
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(f().data)
            flat[i] = orig - h
            lm = float(f().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
