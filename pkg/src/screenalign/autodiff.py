"""Reverse-mode automatic differentiation over dense 2-D float arrays.

Every value is a 2-D matrix (scalars are 1x1, vectors are 1xd rows). The
computation graph lives on the tensors themselves: each op result keeps
references to its parents plus a closure that propagates gradients. Node ids
are assigned from a global counter at creation time, so creation order is a
valid topological order and the backward pass visits nodes (and accumulates
gradients) in fixed node-id order, which makes results bitwise reproducible.

Storage is float32 by default; reductions (sums, means, norms, matmul inner
products) accumulate in float64 before casting back. A float64 storage mode
exists for gradient verification against finite differences.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_ids = itertools.count()

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


def _as_array(data, dtype):
    if dtype is None:
        # preserve an existing float dtype; everything else becomes the default
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = DEFAULT_DTYPE
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """Node of the computation graph: a 2-D array plus backward bookkeeping."""

    __slots__ = ("_id", "data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward=None, _op="leaf"):
        self._id = next(_ids)
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = _op
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite values produced by op '{_op}'")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """Return a new leaf sharing this value but cut off from the graph."""
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; all real work happens in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), requires_grad=False)


def _accum(tensor, delta):
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += delta.astype(tensor.data.dtype, copy=False)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` along axes that were broadcast (f64 accum)."""
    if grad.shape == shape:
        return grad
    g = grad.astype(np.float64, copy=False)
    if shape[0] == 1 and grad.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward, op):
    req = _needs_grad(*parents)
    return Tensor(data, requires_grad=req, dtype=data.dtype,
                  _parents=parents if req else (),
                  _backward=backward if req else None, _op=op)


# ---------------------------------------------------------------------------
# elementwise arithmetic (with 2-D numpy broadcasting)

def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, -_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward, "sub")


def neg(a):
    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(out_data, (a, b), backward, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out_data, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    dt = np.result_type(a.data, b.data)
    out_data = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(dt)

    def backward(g):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            _accum(a, g64 @ b.data.astype(np.float64).T)
        if b.requires_grad:
            _accum(b, a.data.astype(np.float64).T @ g64)

    return _result(out_data, (a, b), backward, "matmul")


def transpose(a):
    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _result(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, cast back to storage dtype)

def sum_all(a):
    dt = a.data.dtype
    out_data = np.array([[a.data.sum(dtype=np.float64)]], dtype=dt)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, g[0, 0]))

    return _result(out_data, (a,), backward, "sum")


def sum_axis(a, axis):
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    dt = a.data.dtype
    out_data = a.data.sum(axis=axis, keepdims=True, dtype=np.float64).astype(dt)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape))

    return _result(out_data, (a,), backward, f"sum_axis{axis}")


def mean_all(a):
    n = a.data.size
    return mul(sum_all(a), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _result(out_data, (a,), backward, "exp")


def log(a):
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _result(out_data, (a,), backward, "log")


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward, "tanh")


def sigmoid(a):
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward, "sigmoid")


def gelu(a):
    """GELU with the tanh approximation (branch-free, deterministic)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _accum(a, g * d)

    return _result(out_data, (a,), backward, "gelu")


def log_sigmoid(a):
    """log(sigmoid(x)) computed without overflow for |x| up to ~1e3."""
    x = a.data
    out_data = (np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            # d/dx log sigmoid(x) = sigmoid(-x)
            z = np.exp(-np.abs(x))
            sig_neg = np.where(x >= 0, z / (1.0 + z), 1.0 / (1.0 + z))
            _accum(a, g * sig_neg)

    return _result(out_data, (a,), backward, "log_sigmoid")


def clamp_max(a, cap):
    out_data = np.minimum(a.data, cap)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (a.data < cap))

    return _result(out_data, (a,), backward, "clamp_max")


# ---------------------------------------------------------------------------
# row-wise softmax family (max-subtracted; safe for |x| <= 80 and far beyond)

def softmax_rows(x):
    shifted = x.data.astype(np.float64) - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = (e / e.sum(axis=1, keepdims=True)).astype(x.data.dtype)

    def backward(g):
        y = out_data.astype(np.float64)
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g64 - dot))

    return _result(out_data, (x,), backward, "softmax_rows")


def log_softmax_rows(x):
    m = x.data.max(axis=1, keepdims=True)
    shifted = x.data.astype(np.float64) - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = (shifted - lse).astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        soft = np.exp(out_data.astype(np.float64))
        _accum(x, g64 - soft * g64.sum(axis=1, keepdims=True))

    return _result(out_data, (x,), backward, "log_softmax_rows")


def masked_softmax_rows(x, mask):
    """Softmax over the True entries of each row; False entries get weight 0.

    `mask` is a constant boolean array, not a graph node. Rows with no True
    entry are rejected. Because excluded positions get an exact zero weight,
    they contribute nothing to the output or to upstream gradients.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} != input shape {x.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("masked_softmax_rows: a row has no unmasked entries")
    neg = np.where(mask, x.data.astype(np.float64), -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out_data = (e / e.sum(axis=1, keepdims=True)).astype(x.data.dtype)

    def backward(g):
        y = out_data.astype(np.float64)
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g64 - dot))

    return _result(out_data, (x,), backward, "masked_softmax_rows")


# ---------------------------------------------------------------------------
# normalization

def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row standardization followed by the affine (gain, bias)."""
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ValueError("gain/bias must be 1 x d rows matching the input width")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = x64.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out_data = (gain.data.astype(np.float64) * xhat + bias.data.astype(np.float64)).astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        if gain.requires_grad:
            _accum(gain, (g64 * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            _accum(bias, g64.sum(axis=0, keepdims=True))
        if x.requires_grad:
            dxhat = g64 * gain.data.astype(np.float64)
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _result(out_data, (x, gain, bias), backward, "layer_norm")


def normalize_rows(x):
    """L2-normalize each row. Zero rows are an error, not a silent fallback."""
    x64 = x.data.astype(np.float64)
    norms = np.sqrt((x64 * x64).sum(axis=1, keepdims=True))
    if (norms < 1e-30).any():
        raise ValueError("normalize_rows: zero-norm row")
    y = x64 / norms
    out_data = y.astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=1, keepdims=True)
        _accum(x, (g64 - y * dot) / norms)

    return _result(out_data, (x,), backward, "normalize_rows")


# ---------------------------------------------------------------------------
# shape surgery

def slice_cols(x, lo, hi):
    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            _accum(x, full)

    return _result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backward, "slice_cols")


def slice_rows(x, lo, hi):
    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[lo:hi, :] = g
            _accum(x, full)

    return _result(np.ascontiguousarray(x.data[lo:hi, :]), (x,), backward, "slice_rows")


def concat_rows(tensors):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, g[lo:hi, :])

    return _result(out_data, tuple(tensors), backward, "concat_rows")


def concat_cols(tensors):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, g[:, lo:hi])

    return _result(out_data, tuple(tensors), backward, "concat_cols")


def gather_rows(table, ids):
    """Select rows of `table` by integer index (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("ids must be a flat index list")

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)  # sequential accumulation: deterministic
            _accum(table, full)

    return _result(table.data[ids], (table,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# composites

def cosine_sim_matrix(p, q):
    """All-pairs cosine similarity: rows of `p` against rows of `q`."""
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"width mismatch: {p.shape} vs {q.shape}")
    return matmul(normalize_rows(p), transpose(normalize_rows(q)))


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# backward driver

def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Visits the reachable subgraph in descending node-id order (creation order
    is topological, so this is an exact reverse-topological sweep) and lets
    every node push gradient into its parents. Accumulation order is therefore
    fixed, independent of thread count, and bitwise reproducible. Calling
    again after zeroing gradients reproduces the same values.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)

    # interior grads are engine-internal scratch; leaves keep accumulating
    for node in nodes.values():
        if node._backward is not None:
            node.grad = None

    loss.grad = np.ones_like(loss.data)
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
