"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray (float32 by default, float64 for gradient
checking) together with an optional gradient buffer and a backward
closure. Operations executed while gradients are enabled link their
output to the input tensors; ``backward`` walks the recorded graph in
reverse topological order and accumulates dLoss/dX into ``.grad``.

Broadcasting is deliberately narrow: two operands must have identical
shapes, or one of them must be a scalar or a vector matching the other's
trailing axis. Anything else raises DimensionError rather than silently
following numpy's rules.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, GraphError, NumericError

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An ndarray with an optional gradient and a place in the graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise GraphError("cannot nest a Tensor inside a Tensor")
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = ()
        self._backward = None

    # -- structure ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

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

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def permute(self, axes):
        return permute(self, axes)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(out_data, parents, backward) -> Tensor:
    """Create the output node, linking it to parents when recording."""
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(sa, sb, opname):
    """Permit equal shapes, a scalar operand, or a trailing-axis vector."""
    if sa == sb:
        return
    if len(sa) == 0 or len(sb) == 0:
        return
    if len(sa) == 1 and sa[0] == 1 or len(sb) == 1 and sb[0] == 1:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    raise DimensionError(f"{opname}: shapes {sa} and {sb} do not broadcast (scalar or trailing-axis vector only)")


def _fit_grad(g, shape):
    """Reduce an output gradient back to an operand's (broadcast) shape."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_fit_grad(g, a.shape))
        if b.requires_grad:
            b._accumulate(_fit_grad(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "sub")
    out_data = a.data - b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_fit_grad(g, a.shape))
        if b.requires_grad:
            b._accumulate(_fit_grad(-g, b.shape))

    return _make(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_fit_grad(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_fit_grad(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "div")
    out_data = a.data / b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_fit_grad(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_fit_grad(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g, a=a, s=s):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(a.data * np.asarray(s, dtype=a.data.dtype), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bw)


# -- shape ops ---------------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects rank 2, got shape {a.shape}")

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), bw)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)

    def bw(g, a=a, inv=tuple(inv)):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes).copy(), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, tensors=tensors, offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), bw)


def take_slice(a: Tensor, key) -> Tensor:
    out_data = a.data[key]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)

    def bw(g, a=a, key=key):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] += g
            a._accumulate(buf)

    return _make(out_data.copy(), (a,), bw)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 by integer index; scatter-add on backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take_rows expects a 1-d index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"take_rows: index out of range for {a.shape[0]} rows")
    out_data = a.data[idx]

    def bw(g, a=a, idx=idx):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _make(out_data, (a,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table (same mechanics as take_rows)."""
    return take_rows(table, ids)


# -- reductions --------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axis)

    def bw(g, a=a, axis=axis):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True))
        else:
            shape = list(a.shape)
            for ax in axis:
                shape[ax] = 1
            a._accumulate(np.broadcast_to(g.reshape(shape), a.shape).astype(a.data.dtype, copy=True))

    return _make(np.asarray(out_data), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        n = a.size
    else:
        n = 1
        for ax in axis:
            n *= a.shape[ax]
    out_data = a.data.mean(axis=axis)

    def bw(g, a=a, axis=axis, n=n):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.shape).astype(a.data.dtype, copy=True))
        else:
            shape = list(a.shape)
            for ax in axis:
                shape[ax] = 1
            a._accumulate(np.broadcast_to(g.reshape(shape) / n, a.shape).astype(a.data.dtype, copy=True))

    return _make(np.asarray(out_data), (a,), bw)


def amax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; gradient routes to the first maximal entry."""
    axis = axis % a.ndim
    out_data = a.data.max(axis=axis)
    arg = a.data.argmax(axis=axis)

    def bw(g, a=a, arg=arg, axis=axis):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            onehot = np.expand_dims(arg, axis)
            np.put_along_axis(buf, onehot, np.expand_dims(g, axis), axis)
            a._accumulate(buf)

    return _make(np.asarray(out_data), (a,), bw)


# -- pointwise nonlinearities -------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g, a=a, out_data=out_data):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails: exp is only taken of non-positive values.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                        np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    out_data = out_data.astype(x.dtype, copy=False)

    def bw(g, a=a, out_data=out_data):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g, a=a, out_data=out_data):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False)

    def bw(g, a=a, t=t):
        x = a.data
        if a.requires_grad:
            dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _make(out_data, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|)."""
    x = a.data
    out_data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)

    def bw(g, a=a):
        if a.requires_grad:
            x = a.data
            sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                           np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
            a._accumulate(g * sig)

    return _make(out_data, (a,), bw)


# -- normalizers ---------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g, a=a, out_data=out_data, axis=axis):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("log_softmax received NaN input")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bw(g, a=a, out_data=out_data, axis=axis):
        if a.requires_grad:
            soft = np.exp(out_data)
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match trailing axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = (xhat * gain.data + bias.data).astype(x.data.dtype, copy=False)

    def bw(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)

    return _make(out_data, (x, gain, bias), bw)


# -- graph walking -------------------------------------------------------------


class Tape:
    """Topologically ordered record of the graph reachable from a root.

    Parents always precede children; the backward walk visits each node
    exactly once, in reverse order.
    """

    def __init__(self, root: Tensor):
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Accumulate dLoss/dX into .grad for every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor that does not require grad")
    tape = Tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


# -- finite-difference checking ------------------------------------------------


def gradcheck(fn, inputs, eps: float = 1e-4):
    """Compare analytic gradients of a scalar function against central differences.

    ``inputs`` must be float64 tensors with requires_grad=True; they are
    perturbed in place and restored. Returns the maximum relative error
    max(|fd - an| / max(1, |fd|, |an|)) over every input entry.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise GraphError("gradcheck requires float64 inputs")
    zero_grads(inputs)
    out = fn(*inputs)
    if out.data.size != 1:
        raise GraphError("gradcheck target must be scalar")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    max_rel = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn(*inputs).data)
                flat[i] = orig - eps
                f_minus = float(fn(*inputs).data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(fd - an_flat[i]) / max(1.0, abs(fd), abs(an_flat[i]))
                if rel > max_rel:
                    max_rel = rel
    return max_rel
