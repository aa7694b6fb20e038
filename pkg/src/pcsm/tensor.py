"""Reverse-mode autodiff over numpy arrays.

A dynamic tape: every operation records its parents and a closure that
accumulates gradients into them. The graph is rebuilt on each forward pass
and freed by backward(). Broadcasting is supported for leading batch
dimensions (trailing dims must match, or be size 1 on one side); gradients
are sum-reduced back to the parent shapes.

Tensors are immutable after construction except for the gradient buffer.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels, precision
from .errors import ContractError, DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference / metric evaluation)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=precision.dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Parameter:
    """A named leaf tensor with gradients enabled."""

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    """Accumulate a gradient the caller may still alias (copies on first
    touch)."""
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        np.add(t.grad, g, out=t.grad)


def _accum_owned(t: Tensor, g: np.ndarray):
    """Accumulate a gradient buffer the parent may adopt without copying.

    Safe when g is freshly allocated, or is (a view of) a child's gradient
    that has already been consumed by that child's backward step. At most
    one parent may adopt a given buffer; the shared-passthrough cases
    (e.g. both operands of add) must go through _accum instead.
    """
    if t.grad is None:
        t.grad = g
    else:
        np.add(t.grad, g, out=t.grad)


def _accum_reduced(t: Tensor, g: np.ndarray):
    """Accumulate a possibly broadcast gradient; the reduction result (a
    fresh array whenever any reduction happened) is adopted directly."""
    red = _unbroadcast(g, t.shape)
    if red is g:
        _accum(t, red)
    else:
        _accum_owned(t, red)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the parent shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse traversal from a scalar; frees the graph afterwards."""
    if loss.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}"
        )
    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free the tape; leaf gradients stay
    for node in topo:
        if node._parents:
            node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            if g.shape == a.data.shape:
                _accum_owned(a, g)
            else:
                _accum_reduced(a, g)
        if b.requires_grad:
            _accum_reduced(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            if g.shape == a.data.shape:
                _accum_owned(a, g)
            else:
                _accum_reduced(a, g)
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def scale(a, c) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g * c)

    return _make(a.data * c, (a,), bwd)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul_tn(a, b) -> Tensor:
    """a^T @ b over the last two axes: (..., n, k) x (..., n, d) -> (..., k, d).

    Equivalent to matmul(transpose_last(a), b) but keeps a's gradient in
    a's own layout, which matters in the spectral-transform hot path.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-2] != b.shape[-2]:
        raise DimensionError(
            f"matmul_tn needs matching row counts, got {a.shape} and {b.shape}"
        )

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(b.data, g.swapaxes(-1, -2))
            _accum_owned(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data, g)
            _accum_owned(b, _unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data.swapaxes(-1, -2), b.data), (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )

    if b.ndim == 2 and a.ndim > 2:
        # batched-by-2d-weight case: collapse the batch into one GEMM
        k, n = b.shape
        out_shape = a.shape[:-1] + (n,)

        def bwd2(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _accum_owned(a, np.matmul(g2, b.data.T).reshape(a.shape))
            if b.requires_grad:
                a2 = a.data.reshape(-1, k)
                _accum_owned(b, np.matmul(a2.T, g2))

        out = np.matmul(a.data.reshape(-1, k), b.data).reshape(out_shape)
        return _make(out, (a, b), bwd2)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum_owned(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum_owned(b, _unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = _as_tensor(a)
    y = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g * (a.data > 0))

    return _make(y, (a,), bwd)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    y, t = kernels.gelu_fwd(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, kernels.gelu_bwd(a.data, t, g))

    return _make(y, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g * (1.0 - y * y))

    return _make(y, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g * (0.5 / y))

    return _make(y, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g * y)

    return _make(y, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    assert np.isfinite(np.max(a.data)), "softmax received NaN/inf input"
    last = axis in (-1, a.ndim - 1)
    x = a.data if last else np.moveaxis(a.data, axis, -1)
    y = kernels.softmax_fwd(x)
    out = y if last else np.moveaxis(y, -1, axis)

    def bwd(g):
        if a.requires_grad:
            gm = g if last else np.moveaxis(g, axis, -1)
            gx = kernels.softmax_bwd(y, gm)
            _accum_owned(a, gx if last else np.moveaxis(gx, -1, axis))

    return _make(out, (a,), bwd)


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine.

    gain/bias are (d,) vectors, or carry extra leading axes broadcastable
    against a (per-head parameter stacks).
    """
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if gain.shape[-1] != a.shape[-1] or bias.shape[-1] != a.shape[-1]:
        raise DimensionError(
            f"layernorm affine shape {gain.shape}/{bias.shape} does not match "
            f"last axis of {a.shape}"
        )
    xhat, inv = kernels.layernorm_fwd(a.data, eps)
    y = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accum_owned(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum_reduced(bias, g)
        if a.requires_grad:
            _accum_owned(a, kernels.layernorm_bwd(xhat, inv, g * gain.data))

    return _make(y, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# shape / reduction


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(a.data.transpose(axes), (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum_owned(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(y), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        if a.requires_grad:
            _accum_reduced(a, g)

    return _make(np.broadcast_to(a.data, shape), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum_owned(t, g[tuple(idx)])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd
    )


def split(a, sizes, axis: int = 0) -> list[Tensor]:
    a = _as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(
            f"split sizes {sizes} do not cover axis {axis} of {a.shape}"
        )
    outs = []
    lo = 0
    for s in sizes:
        hi = lo + s
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)

        def bwd(g, idx=idx):
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                np.add(a.grad[idx], g, out=a.grad[idx])

        outs.append(_make(a.data[idx].copy(), (a,), bwd))
        lo = hi
    return outs


def zero_grads(params):
    for p in params:
        p.tensor.grad = None
