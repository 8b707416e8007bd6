"""Reverse-mode automatic differentiation over dense float64 arrays.

Small on purpose: a dynamic tape rebuilt every training step, enough ops
for small MLPs, hash-table lookups with trilinear interpolation, and the
loss stack.  Everything is 64-bit so gradient checks against central
finite differences can be tight.

Gradients are only recorded while a Graph is active::

    with Graph() as g:
        loss = ...
        grads = g.backward(loss)   # node_id -> ndarray, leaves only

Outside a Graph the same ops run as plain numpy (inference mode).
"""

from __future__ import annotations

import itertools
import os
import threading

import numpy as np

_DEBUG = bool(os.environ.get("SPARSECRAFT_DEBUG"))
_node_counter = itertools.count()
_tls = threading.local()


class DiffMathError(Exception):
    pass


class ShapeError(DiffMathError):
    pass


class DomainError(DiffMathError):
    pass


def _active_graph():
    return getattr(_tls, "graph", None)


class Value:
    """A float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "node_id", "graph", "op", "parents", "ctx")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self.graph = None
        self.op = None
        self.parents = ()
        self.ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = self.op or ("leaf" if self.requires_grad else "const")
        return f"Value(shape={self.data.shape}, {tag}, id={self.node_id})"

    # operator sugar; everything funnels through apply()
    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __neg__(self):
        return apply("mul", self, -1.0)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


class Graph:
    """Append-only tape; parents always precede children."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_graph() is not None:
            raise DiffMathError("nested Graph contexts are not supported")
        _tls.graph = self
        return self

    def __exit__(self, *exc):
        _tls.graph = None
        return False

    def backward(self, loss):
        """Gradients of a scalar loss for every requires_grad leaf.

        Returns {node_id: ndarray}.  Non-leaf gradients are discarded as
        soon as their consumers have been processed.
        """
        if not isinstance(loss, Value):
            raise DiffMathError("backward expects a Value")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        out = {}
        if loss.requires_grad and loss.op is None:
            out[loss.node_id] = grads[loss.node_id]
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None or node.op is None:
                continue
            parent_grads = _OPS[node.op].backward(node.ctx, g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = pg.reshape(parent.data.shape)
                if parent.op is None:
                    acc = out.get(parent.node_id)
                    out[parent.node_id] = pg if acc is None else acc + pg
                else:
                    acc = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if acc is None else acc + pg
            node.ctx = None
        return out


class no_grad:
    """Temporarily disable taping inside an active Graph."""

    def __enter__(self):
        self._saved = _active_graph()
        _tls.graph = None
        return self

    def __exit__(self, *exc):
        _tls.graph = self._saved
        return False


# ---------------------------------------------------------------------------
# op registry

_OPS = {}


def register_op(tag):
    def deco(cls):
        _OPS[tag] = cls
        return cls

    return deco


def op_tags():
    return sorted(_OPS)


def apply(op_tag, *inputs, **kw):
    """Run one op, recording it on the active graph when gradients flow."""
    if op_tag not in _OPS:
        raise DiffMathError(f"unknown op {op_tag!r}")
    vals = [as_value(x) for x in inputs]
    op = _OPS[op_tag]
    ctx = {}
    try:
        data = op.forward(ctx, [v.data for v in vals], kw)
    except ValueError as e:
        shapes = [v.data.shape for v in vals]
        raise ShapeError(f"op {op_tag!r} on shapes {shapes}: {e}") from None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise DiffMathError(f"op {op_tag!r} produced non-finite values")
    out = Value(data)
    out.requires_grad = any(v.requires_grad for v in vals)
    graph = _active_graph()
    if graph is not None and out.requires_grad:
        out.graph = graph
        out.op = op_tag
        out.parents = tuple(vals)
        out.ctx = ctx
        graph.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@register_op("add")
class _Add:
    @staticmethod
    def forward(ctx, xs, kw):
        a, b = xs
        ctx["sa"], ctx["sb"] = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])


@register_op("sub")
class _Sub:
    @staticmethod
    def forward(ctx, xs, kw):
        a, b = xs
        ctx["sa"], ctx["sb"] = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx["sa"]), _unbroadcast(-g, ctx["sb"])


@register_op("mul")
class _Mul:
    @staticmethod
    def forward(ctx, xs, kw):
        a, b = xs
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register_op("div")
class _Div:
    @staticmethod
    def forward(ctx, xs, kw):
        a, b = xs
        if np.any(b == 0.0):
            raise DomainError("div: zero divisor")
        ctx["a"], ctx["b"] = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@register_op("matmul")
class _MatMul:
    @staticmethod
    def forward(ctx, xs, kw):
        a, b = xs
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = g
        if a.ndim == 1:
            g2 = g2[None, ...]
        if b.ndim == 1:
            g2 = g2[..., None]
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb


@register_op("sum")
class _Sum:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        axis = kw.get("axis")
        ctx["shape"], ctx["axis"] = a.shape, axis
        return np.sum(a, axis=axis)

    @staticmethod
    def backward(ctx, g):
        shape, axis = ctx["shape"], ctx["axis"]
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


@register_op("mean")
class _Mean:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        axis = kw.get("axis")
        ctx["shape"], ctx["axis"] = a.shape, axis
        ctx["n"] = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis)

    @staticmethod
    def backward(ctx, g):
        shape, axis, n = ctx["shape"], ctx["axis"], ctx["n"]
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)


@register_op("relu")
class _Relu:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        ctx["mask"] = a > 0
        return np.where(ctx["mask"], a, 0.0)

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx["mask"], g, 0.0),)


@register_op("softplus")
class _Softplus:
    # stable branch: max(x,0) + log1p(exp(-|x|)); avoids overflow for |x| > 30
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        from . import kernels

        y, sig = kernels.softplus_forward(a)
        ctx["sig"] = sig
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["sig"],)


@register_op("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        e = np.exp(-np.abs(a))
        s = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        ctx["s"] = s
        return s

    @staticmethod
    def backward(ctx, g):
        s = ctx["s"]
        return (g * s * (1.0 - s),)


@register_op("exp")
class _Exp:
    @staticmethod
    def forward(ctx, xs, kw):
        ctx["y"] = np.exp(xs[0])
        return ctx["y"]

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["y"],)


@register_op("log")
class _Log:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        if np.any(a <= 0.0):
            raise DomainError("log: non-positive operand")
        ctx["a"] = a
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx["a"],)


@register_op("abs")
class _Abs:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        ctx["sign"] = np.sign(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["sign"],)


@register_op("square")
class _Square:
    @staticmethod
    def forward(ctx, xs, kw):
        ctx["a"] = xs[0]
        return xs[0] * xs[0]

    @staticmethod
    def backward(ctx, g):
        return (2.0 * g * ctx["a"],)


@register_op("sqrt")
class _Sqrt:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        if np.any(a < 0.0):
            raise DomainError("sqrt: negative operand")
        ctx["y"] = np.sqrt(a)
        return ctx["y"]

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / np.maximum(ctx["y"], 1e-300),)


@register_op("concat")
class _Concat:
    @staticmethod
    def forward(ctx, xs, kw):
        axis = kw.get("axis", 0)
        ctx["axis"] = axis
        ctx["splits"] = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


@register_op("gather")
class _Gather:
    # rows along axis 0; duplicate indices accumulate on backward
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        idx = np.asarray(kw["indices"], dtype=np.intp)
        ctx["idx"], ctx["n"] = idx, a.shape[0]
        ctx["tail"] = a.shape[1:]
        return a[idx]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros((ctx["n"],) + ctx["tail"], dtype=np.float64)
        np.add.at(out, ctx["idx"], g)
        return (out,)


@register_op("scatter_add")
class _ScatterAdd:
    # sum semantics for duplicate indices
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        idx = np.asarray(kw["indices"], dtype=np.intp)
        size = int(kw["size"])
        ctx["idx"] = idx
        out = np.zeros((size,) + a.shape[1:], dtype=np.float64)
        np.add.at(out, idx, a)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g[ctx["idx"]],)


@register_op("clamp")
class _Clamp:
    # zero gradient outside bounds, identity inside; ties count as inside
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        lo, hi = kw["lo"], kw["hi"]
        ctx["mask"] = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx["mask"], g, 0.0),)


@register_op("norm2")
class _Norm2:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        axis = kw.get("axis")
        y = np.sqrt(np.sum(a * a, axis=axis))
        ctx["a"], ctx["y"], ctx["axis"] = a, y, axis
        return y

    @staticmethod
    def backward(ctx, g):
        a, y, axis = ctx["a"], ctx["y"], ctx["axis"]
        denom = np.maximum(y, 1e-300)
        if axis is None:
            return (g * a / denom,)
        return (np.expand_dims(g / denom, axis) * a,)


@register_op("slice_rows")
class _SliceRows:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        start, stop = int(kw["start"]), int(kw["stop"])
        ctx["start"], ctx["stop"], ctx["shape"] = start, stop, a.shape
        return a[start:stop].copy()

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=np.float64)
        out[ctx["start"] : ctx["stop"]] = g
        return (out,)


@register_op("slice_cols")
class _SliceCols:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        start, stop = int(kw["start"]), int(kw["stop"])
        ctx["start"], ctx["stop"], ctx["shape"] = start, stop, a.shape
        return np.ascontiguousarray(a[:, start:stop])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=np.float64)
        out[:, ctx["start"] : ctx["stop"]] = g
        return (out,)


@register_op("reshape")
class _Reshape:
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        ctx["shape"] = a.shape
        return a.reshape(kw["shape"])

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


@register_op("exclusive_cumprod")
class _ExclusiveCumprod:
    # out[..., i] = prod_{j<i} x[..., j]; used for transmittance weights
    # where x stays strictly positive, so the division form is safe
    @staticmethod
    def forward(ctx, xs, kw):
        (a,) = xs
        shifted = np.ones_like(a)
        shifted[..., 1:] = a[..., :-1]
        out = np.cumprod(shifted, axis=-1)
        ctx["a"], ctx["out"] = a, out
        return out

    @staticmethod
    def backward(ctx, g):
        a, out = ctx["a"], ctx["out"]
        # d/dx_j sum_i g_i out_i = (sum_{i>j} g_i out_i) / x_j
        go = g * out
        tail = np.flip(np.cumsum(np.flip(go, axis=-1), axis=-1), axis=-1)
        tail_excl = np.zeros_like(a)
        tail_excl[..., :-1] = tail[..., 1:]
        safe = np.where(a == 0.0, 1.0, a)
        return (np.where(a == 0.0, 0.0, tail_excl / safe),)


# ---------------------------------------------------------------------------
# convenience wrappers used across the package


def vsum(x, axis=None):
    return apply("sum", x, axis=axis)


def vmean(x, axis=None):
    return apply("mean", x, axis=axis)


def vconcat(parts, axis=0):
    return apply("concat", *parts, axis=axis)


def gather(x, indices):
    return apply("gather", x, indices=indices)


def scatter_add(x, indices, size):
    return apply("scatter_add", x, indices=indices, size=size)


def slice_rows(x, start, stop):
    return apply("slice_rows", x, start=start, stop=stop)


def slice_cols(x, start, stop):
    return apply("slice_cols", x, start=start, stop=stop)


def clamp(x, lo, hi):
    return apply("clamp", x, lo=lo, hi=hi)


def norm2(x, axis=None):
    return apply("norm2", x, axis=axis)


def finite_difference_check(f, x, h):
    """Max relative error between analytic and central-difference gradients.

    f must be a scalar Value-valued function of a Value; x is the point
    (any shape).  Returns the discrepancy, caller asserts.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Value(x, requires_grad=True)
    with Graph() as g:
        loss = f(leaf)
        analytic = g.backward(loss).get(leaf.node_id)
    if analytic is None:
        analytic = np.zeros_like(x)
    flat = x.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Value(xp.reshape(x.shape))).data
        fm = f(Value(xm.reshape(x.shape))).data
        fd[i] = (float(fp) - float(fm)) / (2.0 * h)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - fd) / (np.abs(a) + 1e-12)))
