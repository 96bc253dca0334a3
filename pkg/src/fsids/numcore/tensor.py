"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray plus the bookkeeping needed to backpropagate:
the tensors it was computed from and a closure mapping the output gradient to
parent gradients.  ``backward(loss)`` traces the ancestry of a scalar loss
into a ``Tape`` (creation order is topological order) and walks it once in
reverse.

Training tensors are float32 by default; gradient-check tests run the same
ops at float64.  All ops are deterministic: identical inputs give bitwise
identical outputs and gradients.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import ContractError

_uid_counter = itertools.count()

# When enabled, every op output is checked for NaN/Inf (debug builds / tests).
_check_finite = False


def set_debug_finite(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """An n-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_uid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = ()
        self._backward = None
        self._uid = next(_uid_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Gradient from the most recent backward pass (zeros if untouched)."""
        if self._grad is not None:
            return self._grad
        if self.requires_grad:
            return np.zeros_like(self.data)
        return None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the full op set lives at module level
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _from_op(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._grad = None
    out._parents = parents if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._uid = next(_uid_counter)
    return out


class Tape:
    """Ancestry of one output tensor, ordered so inputs precede their ops."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._uid)
        return cls(nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = Tape.trace(loss)
    grads = {loss._uid: np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(t._uid, None)
        if g is None:
            continue
        if t.requires_grad:
            t._grad = g
        if t._backward is None:
            continue
        parent_grads = t._backward(g)
        for parent, pg in zip(t._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._uid in grads:
                grads[parent._uid] = grads[parent._uid] + pg
            else:
                grads[parent._uid] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**p for a scalar exponent."""
    p = float(exponent)
    data = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _from_op(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _from_op(data, (a,), bw)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_values(a.data)

    def bw(g):
        return (g * data * (1.0 - data),)

    return _from_op(data, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed overflow-free."""
    data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

    def bw(g):
        return (g * _sigmoid_values(a.data),)

    return _from_op(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _from_op(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _from_op(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _from_op(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _from_op(data, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _from_op(data, (a,), bw)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.data.shape[0], -1))


def broadcast_to(a: Tensor, shape) -> Tensor:
    data = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return (_unbroadcast(g, a.data.shape),)

    return _from_op(data, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _from_op(data, tuple(tensors), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows along the leading axis (indices may repeat)."""
    if axis != 0:
        raise ContractError("take supports axis=0 only")
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _from_op(data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / conv / pooling


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        return (g @ b.data.T, a.data.T @ g)

    return _from_op(data, (a, b), bw)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x_shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    gcols = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
    if padding > 0:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ContractError(
            f"conv2d expects NCHW input and OIHW kernel, got {x.data.shape} and {kernel.data.shape}")
    n, ci, h, w = x.data.shape
    o, i_, kh, kw = kernel.data.shape
    if ci != i_:
        raise ContractError(
            f"conv2d channel mismatch: input shape {x.data.shape} vs kernel shape {kernel.data.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ContractError(
            f"conv2d kernel larger than padded input: {x.data.shape} vs {kernel.data.shape}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(o, ci * kh * kw)
    data = np.matmul(wmat[None], cols).reshape(n, o, oh, ow)

    def bw(g):
        gmat = g.reshape(n, o, oh * ow)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.data.shape)
        gcols = np.matmul(wmat.T[None], gmat)
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding)
        return gx, gw

    return _from_op(data, (x, kernel), bw)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first window slot."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ContractError(f"max_pool2x2 needs even spatial dims, got {x.data.shape}")
    hh, ww = h // 2, w // 2
    windows = (x.data.reshape(n, c, hh, 2, ww, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, hh, ww, 4))
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, c, hh, ww, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (gx,)

    return _from_op(data, (x,), bw)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _from_op(data, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bw(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _from_op(data, (a,), bw)
