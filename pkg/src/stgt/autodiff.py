"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
operation with at least one differentiable input is appended to it together
with a closure computing the vector-Jacobian product; :meth:`Tape.backward`
replays the record in reverse.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(hadamard(w, w))
    ...     tape.backward(loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])

Only row-vector broadcasting (bias addition) is supported.
"""
from __future__ import annotations

import itertools
import threading

import numpy as np

from .errors import NumericError, ShapeError, StateError, ContractError

LN_EPS = 1e-5

_tape_ids = itertools.count(1)
_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A 2-D float64 array that may take part in one tape at a time."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name", "extras")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self.name = name
        self.extras = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations issued inside the ``with`` block are
    recorded. Leaves are bound to the tape until it is reset or closed.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._consumed = False
        self._open = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        self._open = True
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        self._open = False
        self.release()
        return False

    def _bind(self, t: Tensor):
        if t.tape_id is None:
            t.tape_id = self.id
            self.leaves.append(t)
        elif t.tape_id != self.id:
            raise StateError(f"{t!r} already belongs to tape {t.tape_id}")

    def record(self, out: Tensor, parents, backward):
        for p in parents:
            if p.requires_grad:
                self._bind(p)
        out.tape_id = self.id
        self.nodes.append(_Node(out, parents, backward))

    def release(self):
        for leaf in self.leaves:
            if leaf.tape_id == self.id:
                leaf.tape_id = None
        for node in self.nodes:
            node.out.tape_id = None

    def reset(self):
        """Drop the record so the tape can be reused."""
        self.release()
        self.nodes = []
        self.leaves = []
        self._consumed = False

    def backward(self, loss: Tensor):
        """Populate ``.grad`` of every differentiable tensor reachable from ``loss``."""
        if loss.shape != (1, 1):
            raise ContractError(f"backward() needs a scalar (1x1) loss, got {loss.shape}")
        if self._consumed:
            raise StateError("backward() already ran on this tape; call reset() first")
        if loss.tape_id != self.id or not loss.requires_grad:
            raise StateError("loss was not recorded on this tape")
        self._consumed = True
        for leaf in self.leaves:
            leaf.grad = None
        for node in self.nodes:
            node.out.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for p, pg in zip(node.parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                p.grad = pg if p.grad is None else p.grad + pg
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _result(data, parents, backward):
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(out, parents, backward)
    return out


def custom(data, parents, backward) -> Tensor:
    """Build a differentiable op from a forward value and a VJP closure.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    parents = tuple(as_tensor(p) for p in parents)
    return _result(np.asarray(data, dtype=np.float64), parents, backward)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a ``1 x n`` row broadcast over the rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif b.shape == (1, a.shape[1]):
        def backward(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    return _result(a.data + b.data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None,
                g * ad if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ ({a.shape} vs {b.shape})")
    k = a.shape[1]
    return _result(np.hstack([a.data, b.data]), (a, b), lambda g: (g[:, :k], g[:, k:]))


# --- pointwise --------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= -1.0):
        raise NumericError("log1p: input must exceed -1")
    return _result(np.log1p(x), (a,), lambda g: (g / (1.0 + x),))


# --- reductions and indexing ------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size
    return _result(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n, m = a.shape

    def backward(g):
        out = np.zeros((n, m))
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward)


def tile_rows(a, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` vertically."""
    a = as_tensor(a)
    r, c = a.shape
    return _result(np.tile(a.data, (reps, 1)), (a,),
                   lambda g: (g.reshape(reps, r, c).sum(axis=0),))


# --- normalisation ----------------------------------------------------------

def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN in input")
    p = _softmax_last(a.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (a,), backward)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[1]
    if n < 2:
        raise ShapeError("layer_norm needs at least 2 columns")
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ShapeError(f"layer_norm: gain/bias must be (1, {n}), got {gain.shape}/{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx,
                (g * xhat).sum(axis=0, keepdims=True) if gain.requires_grad else None,
                g.sum(axis=0, keepdims=True) if bias.requires_grad else None)

    return _result(out, (x, gain, bias), backward)


# --- grouped attention ------------------------------------------------------

ATTENTION_MODES = ("none", "post_softmax", "pre_softmax")


def grouped_attention(q, k, v, index, heads: int = 1, mask=None,
                      mode: str = "none", scale_by: float | None = None) -> Tensor:
    """Scaled dot-product attention inside row groups of ``q``/``k``/``v``.

    ``index`` is an integer ``(G, S)`` array listing the member rows of each
    group, padded with ``-1``. Rows may belong to several groups. The result
    has one row per valid ``index`` entry, in row-major order of ``index``.

    ``mask`` is a ``(G, S, S)`` 0/1 array used when ``mode`` is
    ``"post_softmax"`` (weights are multiplied by the mask after the softmax,
    so rows need not sum to one) or ``"pre_softmax"`` (masked scores are set to
    ``-inf`` before the softmax). Head ``i`` uses columns
    ``i*dk:(i+1)*dk``; scores are multiplied by ``scale_by`` (default
    ``1/sqrt(dk)``). The weights are kept in ``out.extras["weights"]`` with
    shape ``(G, heads, S, S)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    dk = d // heads
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2:
        raise ShapeError("attention: index must be (groups, size)")
    G, S = index.shape
    valid = index >= 0
    dense = bool(valid.all()) and index.size == n and np.array_equal(index.ravel(), np.arange(n))
    safe = np.where(valid, index, 0)
    scale_by = 1.0 / np.sqrt(dk) if scale_by is None else float(scale_by)

    def split(x):
        g = x.reshape(G, S, d) if dense else x[safe]
        return g.reshape(G, S, heads, dk).transpose(0, 2, 1, 3)

    Qh, Kh, Vh = split(q.data), split(k.data), split(v.data)
    scores = (Qh @ Kh.transpose(0, 1, 3, 2)) * scale_by
    if np.isnan(scores).any():
        raise NumericError("attention: NaN scores")
    block = ~valid[:, None, None, :]
    if mode != "none":
        if mask is None:
            raise ContractError(f"attention mode {mode!r} needs a mask")
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (G, S, S):
            raise ShapeError(f"attention: mask shape {mask.shape} != {(G, S, S)}")
        if mode == "pre_softmax":
            block = block | (mask[:, None, :, :] == 0)
    # padding query rows are discarded; keep their softmax finite
    block = block & valid[:, None, :, None]
    scores = np.where(block, -np.inf, scores)
    P = _softmax_last(scores)
    W = P * mask[:, None, :, :] if mode == "post_softmax" else P
    O = W @ Vh
    flat = O.transpose(0, 2, 1, 3).reshape(G, S, d)
    out_data = flat.reshape(n, d) if dense else flat[valid]

    def merge(xh):
        return xh.transpose(0, 2, 1, 3).reshape(G, S, d)

    def scatter(xg):
        if dense:
            return xg.reshape(n, d)
        out = np.zeros((n, d))
        np.add.at(out, index[valid], xg[valid])
        return out

    def backward(g):
        if dense:
            gO = g.reshape(G, S, d)
        else:
            gO = np.zeros((G, S, d))
            gO[valid] = g
        gO = gO.reshape(G, S, heads, dk).transpose(0, 2, 1, 3)
        dV = W.transpose(0, 1, 3, 2) @ gO
        dW = gO @ Vh.transpose(0, 1, 3, 2)
        dP = dW * mask[:, None, :, :] if mode == "post_softmax" else dW
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale_by
        dQ = dS @ Kh
        dK = dS.transpose(0, 1, 3, 2) @ Qh
        return (scatter(merge(dQ)) if q.requires_grad else None,
                scatter(merge(dK)) if k.requires_grad else None,
                scatter(merge(dV)) if v.requires_grad else None)

    out = _result(out_data, (q, k, v), backward)
    out.extras = {"weights": W}
    return out
