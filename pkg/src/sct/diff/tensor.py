"""Reverse-mode automatic differentiation over dense numpy arrays.

Float32 storage, explicit shapes, no implicit broadcasting: binary ops
require identical shapes, with python scalars (and 0-d tensors) as the
only exception. Every op records a vector-Jacobian closure on the output
node; ``backward`` on a scalar root walks the graph in reverse
topological order and accumulates (+=) into the grad buffer of every
reachable tensor that requires grad. Buffers are never zeroed
implicitly.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse as _sparse
from scipy.special import erf as _erf

__all__ = [
    "Tensor", "ShapeError", "float64_eval",
    "add", "sub", "mul", "matmul", "concat", "slice_", "reshape",
    "transpose", "sum_", "mean", "sigmoid", "gelu", "softplus", "log",
    "exp", "cos", "sin", "softmax", "log_softmax", "layer_norm",
    "embedding_gather", "l2_norm", "gather_sum", "scale_rows",
    "broadcast_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: operand shapes {detail} do not conform")


# Active compute dtype. Everything runs float32; finite-difference
# oracles flip this to float64 so truncation error is not drowned by
# storage roundoff. Analytic backward always happens in the dtype the
# graph was built with.
_ACTIVE = {"dtype": np.float32}


def _dt():
    return _ACTIVE["dtype"]


@contextlib.contextmanager
def float64_eval():
    """Run forward construction in float64 within the block."""
    prev = _ACTIVE["dtype"]
    _ACTIVE["dtype"] = np.float64
    try:
        yield
    finally:
        _ACTIVE["dtype"] = prev


def _cast(arr: np.ndarray) -> np.ndarray:
    dt = _dt()
    if arr.dtype == dt:
        return arr
    return arr.astype(dt)


class Tensor:
    """A dense array plus an optional gradient buffer.

    ``grad`` exists exactly when ``requires_grad`` is True, and has the
    same shape as ``data``. Leaf construction only; op outputs are built
    internally.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dt())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self):
        """Accumulate d(self)/d(ancestor) into every requires_grad ancestor.

        Only scalar roots are supported. Repeated calls keep adding, so
        grads from separate roots sum exactly as the grad of their sum.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward root must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = self._toposort()
        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                k = id(parent)
                if k in flows:
                    flows[k] = flows[k] + pg
                else:
                    flows[k] = pg

    def _toposort(self):
        order = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        return order

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _out(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.name = None
    rg = any(p.requires_grad for p in parents)
    t.requires_grad = rg
    # np.zeros over zeros_like: calloc avoids an eager memset pass
    t.grad = np.zeros(data.shape, dtype=data.dtype) if rg else None
    t._parents = tuple(parents) if rg else ()
    t._vjp = vjp if rg else None
    return t


def _is_scalar_tensor(t: Tensor) -> bool:
    return t.data.ndim == 0


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.asarray(x, dtype=_dt()))
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape or _is_scalar_tensor(a) or _is_scalar_tensor(b):
        return
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # collapse a full-shape gradient down to a 0-d operand
    if _is_scalar_tensor(t) and g.ndim != 0:
        return g.sum()
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("add", a, b)
    data = _cast(a.data) + _cast(b.data)

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _out(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("sub", a, b)
    data = _cast(a.data) - _cast(b.data)

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _out(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes("mul", a, b)
    ad, bd = _cast(a.data), _cast(b.data)
    data = ad * bd

    def vjp(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return _out(data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = _cast(a.data), _cast(b.data)
    data = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _out(data, (a, b), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ValueError("concat of empty sequence")
    nd = ts[0].ndim
    for t in ts[1:]:
        if t.ndim != nd:
            raise ShapeError("concat", *(t.shape for t in ts))
        for ax in range(nd):
            if ax != (axis % nd) and t.shape[ax] != ts[0].shape[ax]:
                raise ShapeError("concat", *(t.shape for t in ts))
    data = np.concatenate([_cast(t.data) for t in ts], axis=axis)
    sizes = [t.shape[axis % nd] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _out(data, ts, vjp)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing with ints and slices (no negative steps)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if isinstance(k, slice):
            if k.step is not None and k.step < 0:
                raise ValueError("slice_: negative steps unsupported")
        elif not isinstance(k, (int, np.integer)):
            raise TypeError(f"slice_: unsupported index {k!r}")
    data = x.data[key]
    if data.base is not None:
        data = data.copy()
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    return _out(data, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    old = x.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _out(data, (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    data = x.data.T.copy()

    def vjp(g):
        return (g.T,)

    return _out(data, (x,), vjp)


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _out(data, (x,), vjp)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def sigmoid(x: Tensor) -> Tensor:
    xd = _cast(x.data)
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _out(data, (x,), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) gelu."""
    xd = _cast(x.data)
    phi = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    data = (xd * phi).astype(xd.dtype)

    def vjp(g):
        dens = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi + xd * dens),)

    return _out(data, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    xd = _cast(x.data)
    data = np.logaddexp(np.zeros((), dtype=xd.dtype), xd)
    sig = 1.0 / (1.0 + np.exp(-np.clip(xd, -60, 60)))

    def vjp(g):
        return (g * sig,)

    return _out(data, (x,), vjp)


def log(x: Tensor) -> Tensor:
    xd = _cast(x.data)
    data = np.log(xd)

    def vjp(g):
        return (g / xd,)

    return _out(data, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    data = np.exp(_cast(x.data))

    def vjp(g):
        return (g * data,)

    return _out(data, (x,), vjp)


def cos(x: Tensor) -> Tensor:
    xd = _cast(x.data)
    data = np.cos(xd)

    def vjp(g):
        return (-g * np.sin(xd),)

    return _out(data, (x,), vjp)


def sin(x: Tensor) -> Tensor:
    xd = _cast(x.data)
    data = np.sin(xd)

    def vjp(g):
        return (g * np.cos(xd),)

    return _out(data, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = _cast(x.data)
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _out(data, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = _cast(x.data)
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _out(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd, gd, bd = _cast(x.data), _cast(gain.data), _cast(bias.data)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gd + bd

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red) if red else g * xhat
        dbias = g.sum(axis=red) if red else g.copy()
        return dx, dgain, dbias

    return _out(data, (x, gain, bias), vjp)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer id array (1-D)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_gather", idx.shape)
    if table.ndim != 2:
        raise ShapeError("embedding_gather", table.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_gather: id out of range for table of {table.shape[0]} rows")
    td = _cast(table.data)
    data = td[idx]
    shape = td.shape

    def vjp(g):
        if idx.size == 0:
            return (np.zeros(shape, dtype=g.dtype),)
        # scatter-add rows via a sparse selector; much faster than
        # np.add.at for large gathers and deterministic in entry order
        sel = _sparse.csr_matrix(
            (np.ones(idx.size, dtype=g.dtype), idx,
             np.arange(idx.size + 1)),
            shape=(idx.size, shape[0]))
        return (np.asarray(sel.T @ g),)

    return _out(data, (table,), vjp)


def l2_norm(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    xd = _cast(x.data)
    sq = (xd * xd).sum(axis=axis, keepdims=keepdims)
    data = np.sqrt(sq)

    def vjp(g):
        denom = np.maximum(data, 1e-12)
        if axis is None:
            return (np.broadcast_to(g / denom, xd.shape) * xd,)
        if keepdims:
            gg, dd = g, denom
        else:
            gg, dd = np.expand_dims(g, axis), np.expand_dims(denom, axis)
        return (np.broadcast_to(gg / dd, xd.shape) * xd,)

    return _out(data, (x,), vjp)


def gather_sum(x: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """out[i] = sum_j w[i, j] * x[idx[i, j]] for a 2-D ``x``.

    idx and w are fixed (m, k) arrays, not differentiated; rows with
    w[i, j] == 0 act as padding.
    """
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(w)
    if x.ndim != 2 or idx.ndim != 2 or idx.shape != w.shape:
        raise ShapeError("gather_sum", x.shape, idx.shape, w.shape)
    xd = _cast(x.data)
    wd = w.astype(xd.dtype)
    m, k = idx.shape
    if k == 0:
        return _out(np.zeros((m, x.shape[1]), dtype=xd.dtype), (x,),
                    lambda g: (np.zeros(xd.shape, dtype=g.dtype),))
    # row-stochastic selector: out = sel @ x, grad_x = sel^T @ g.
    # duplicate column ids within a row accumulate, matching the sum.
    sel = _sparse.csr_matrix(
        (wd.reshape(-1), idx.reshape(-1), np.arange(0, m * k + k, k)),
        shape=(m, x.shape[0]))
    data = np.asarray(sel @ xd)

    def vjp(g):
        return (np.asarray(sel.T @ g),)

    return _out(data, (x,), vjp)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Each row of x scaled by the matching entry of s ((m,) or (m, 1))."""
    if x.ndim != 2 or s.shape not in ((x.shape[0],), (x.shape[0], 1)):
        raise ShapeError("scale_rows", x.shape, s.shape)
    xd, sd = _cast(x.data), _cast(s.data)
    col = sd.reshape(-1, 1)
    data = xd * col

    def vjp(g):
        gs = (g * xd).sum(axis=1).reshape(s.shape)
        return g * col, gs

    return _out(data, (x, s), vjp)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a (d,) or (1, d) vector into n rows."""
    if v.ndim == 1:
        row = v.data.reshape(1, -1)
    elif v.ndim == 2 and v.shape[0] == 1:
        row = v.data
    else:
        raise ShapeError("broadcast_rows", v.shape)
    data = np.repeat(_cast(row), n, axis=0)
    shape = v.shape

    def vjp(g):
        return (g.sum(axis=0).reshape(shape),)

    return _out(data, (v,), vjp)
