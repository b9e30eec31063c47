"""Reverse-mode automatic differentiation over dense float64 arrays.

A minimal tape: every operation records its parents and a backward closure,
``Value.backward()`` runs the closures in reverse topological order. Only
first-order gradients are supported. All math is 64-bit.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Value:
    """A node in the computation graph: float64 array plus a gradient slot.

    Gradients are materialized lazily; reading ``.grad`` of a node the
    backward pass never reached yields exact zeros.
    """

    __slots__ = ("data", "_grad", "_parents", "_backward")

    # make numpy defer mixed expressions like `ndarray - Value` to our ops
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _backward=None):
        self.data = _as_array(data)
        self._grad: Array | None = None
        self._parents: tuple[Value, ...] = _parents
        self._backward: Callable[[], None] | None = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> Array:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Value(shape={self.shape})"

    def _accum(self, g: Array) -> None:
        if self._grad is None:
            # first contribution: a private copy avoids a zeros+add pass
            self._grad = np.array(g, dtype=np.float64)
        else:
            self._grad += g

    def _accum_owned(self, g: Array) -> None:
        """Like _accum for gradients the caller freshly allocated."""
        if self._grad is None:
            self._grad = g
        else:
            self._grad += g

    # -- backward ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable node."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward()

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Value) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return powi(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)


def _data(x) -> Array:
    return x.data if isinstance(x, Value) else _as_array(x)


def _parents_of(*xs) -> tuple[Value, ...]:
    return tuple(x for x in xs if isinstance(x, Value))


# -- binary ops ---------------------------------------------------------

def add(a, b) -> Value:
    ad, bd = _data(a), _data(b)
    out = Value(ad + bd, _parents_of(a, b))

    def _bw():
        g = out._grad
        if isinstance(a, Value):
            a._accum(_unbroadcast(g, ad.shape))
        if isinstance(b, Value):
            b._accum(_unbroadcast(g, bd.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Value:
    ad, bd = _data(a), _data(b)
    out = Value(ad * bd, _parents_of(a, b))

    def _bw():
        g = out._grad
        if isinstance(a, Value):
            a._accum_owned(_unbroadcast(g * bd, ad.shape))
        if isinstance(b, Value):
            b._accum_owned(_unbroadcast(g * ad, bd.shape))

    out._backward = _bw
    return out


def div(a, b) -> Value:
    ad, bd = _data(a), _data(b)
    out = Value(ad / bd, _parents_of(a, b))

    def _bw():
        g = out._grad
        if isinstance(a, Value):
            a._accum_owned(_unbroadcast(g / bd, ad.shape))
        if isinstance(b, Value):
            b._accum_owned(_unbroadcast(-g * ad / (bd * bd), bd.shape))

    out._backward = _bw
    return out


def powi(a: Value, exponent: float) -> Value:
    ad = _data(a)
    out = Value(ad ** exponent, _parents_of(a))

    def _bw():
        a._accum_owned(out._grad * exponent * ad ** (exponent - 1))

    out._backward = _bw
    return out


def matmul(a, b) -> Value:
    """``a @ b`` where ``b`` is a 2-D matrix and ``a`` has any leading dims."""
    ad, bd = _data(a), _data(b)
    if bd.ndim != 2:
        raise ValueError(f"matmul expects a 2-D right operand, got shape {bd.shape}")
    if ad.ndim < 1 or ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    out = Value(np.matmul(ad, bd), _parents_of(a, b))

    def _bw():
        g = out._grad
        if isinstance(a, Value):
            a._accum_owned(np.matmul(g, bd.T))
        if isinstance(b, Value):
            k = ad.shape[-1]
            b._accum_owned(np.matmul(ad.reshape(-1, k).T, g.reshape(-1, bd.shape[1])))

    out._backward = _bw
    return out


def linear(x, W, b) -> Value:
    """Affine map ``x @ W + b`` as one fused node; raises on non-chaining shapes."""
    Wd, bd = _data(W), _data(b)
    xd = _data(x)
    if xd.ndim < 1 or xd.shape[-1] != Wd.shape[0] or bd.shape != (Wd.shape[1],):
        raise ValueError(
            f"linear dimension mismatch: x{xd.shape} W{Wd.shape} b{bd.shape}")
    out = Value(np.matmul(xd, Wd) + bd, _parents_of(x, W, b))

    def _bw():
        g = out._grad
        if isinstance(x, Value):
            x._accum_owned(np.matmul(g, Wd.T))
        if isinstance(W, Value):
            k = xd.shape[-1]
            W._accum_owned(np.matmul(xd.reshape(-1, k).T, g.reshape(-1, Wd.shape[1])))
        if isinstance(b, Value):
            b._accum_owned(g.reshape(-1, Wd.shape[1]).sum(axis=0))

    out._backward = _bw
    return out


# -- elementwise --------------------------------------------------------

def _np_sigmoid(d: Array) -> Array:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    """Elementwise logistic function; saturates without overflow.

    Accepts a Value (differentiable) or a plain array/scalar.
    """
    if not isinstance(x, Value):
        d = _as_array(x)
        r = _np_sigmoid(np.atleast_1d(d))
        return r.reshape(d.shape) if d.shape else float(r[0])
    y = _np_sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    out = Value(y, (x,))

    def _bw():
        x._accum_owned(out._grad * y * (1.0 - y))

    out._backward = _bw
    return out


def relu(x: Value) -> Value:
    mask = x.data > 0
    out = Value(np.where(mask, x.data, 0.0), (x,))

    def _bw():
        x._accum_owned(out._grad * mask)

    out._backward = _bw
    return out


def vexp(x: Value) -> Value:
    y = np.exp(x.data)
    out = Value(y, (x,))

    def _bw():
        x._accum_owned(out._grad * y)

    out._backward = _bw
    return out


def vlog(x: Value) -> Value:
    out = Value(np.log(x.data), (x,))

    def _bw():
        x._accum_owned(out._grad / x.data)

    out._backward = _bw
    return out


def softplus(x: Value) -> Value:
    out = Value(np.logaddexp(0.0, x.data), (x,))

    def _bw():
        x._accum_owned(out._grad * _np_sigmoid(np.atleast_1d(x.data)).reshape(x.shape))

    out._backward = _bw
    return out


def clamp_min(x: Value, floor: float) -> Value:
    """max(x, floor); gradient is zero wherever the floor is active."""
    mask = x.data >= floor
    out = Value(np.where(mask, x.data, floor), (x,))

    def _bw():
        x._accum_owned(out._grad * mask)

    out._backward = _bw
    return out


def smooth_l1(x: Value) -> Value:
    """Elementwise huber: 0.5 x^2 inside |x|<=1, |x|-0.5 outside."""
    d = x.data
    out = Value(np.where(np.abs(d) <= 1.0, 0.5 * d * d, np.abs(d) - 0.5), (x,))

    def _bw():
        x._accum_owned(out._grad * np.clip(d, -1.0, 1.0))

    out._backward = _bw
    return out


# -- reductions and shaping ---------------------------------------------

def vsum(x: Value, axis=None, keepdims=False) -> Value:
    out = Value(x.data.sum(axis=axis, keepdims=keepdims), (x,))

    def _bw():
        g = out._grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    out._backward = _bw
    return out


def vmean(x: Value, axis=None, keepdims=False) -> Value:
    n = x.size if axis is None else x.shape[axis]
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def vmax(x: Value, axis: int, keepdims=False) -> Value:
    """Max along one axis; gradient routes to the first maximal element."""
    mx = x.data.max(axis=axis, keepdims=True)
    hit = x.data == mx
    first = hit & (np.cumsum(hit, axis=axis) == 1)
    out = Value(mx if keepdims else np.squeeze(mx, axis=axis), (x,))

    def _bw():
        g = out._grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum_owned(first * g)

    out._backward = _bw
    return out


def softmax(x, axis: int = -1):
    """Normalized exponentials along ``axis``; shift-invariant by construction."""
    if not isinstance(x, Value):
        d = _as_array(x)
        if d.shape[axis] == 0:
            raise ValueError("softmax of empty input")
        z = d - d.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    if x.shape[axis] == 0:
        raise ValueError("softmax of empty input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Value(y, (x,))

    def _bw():
        g = out._grad
        x._accum_owned(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = _bw
    return out


def reshape(x: Value, shape) -> Value:
    orig = x.shape
    out = Value(x.data.reshape(shape), (x,))

    def _bw():
        x._accum(out._grad.reshape(orig))

    out._backward = _bw
    return out


def concat(items: Sequence, axis: int = 0) -> Value:
    datas = [_data(v) for v in items]
    out = Value(np.concatenate(datas, axis=axis), _parents_of(*items))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        g = out._grad
        for v, lo, hi in zip(items, offsets[:-1], offsets[1:]):
            if isinstance(v, Value):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                v._accum(g[tuple(sl)])

    out._backward = _bw
    return out


def take(x: Value, indices) -> Value:
    """Row gather along axis 0."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Value(x.data[idx], (x,))

    def _bw():
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, out._grad)
        x._accum_owned(buf)

    out._backward = _bw
    return out


def segment_sum(x: Value, segment_ids, num_segments: int) -> Value:
    """Sum rows of ``x`` into ``num_segments`` buckets along axis 0."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    data = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(data, seg, x.data)
    out = Value(data, (x,))

    def _bw():
        x._accum_owned(out._grad[seg])

    out._backward = _bw
    return out


# -- oracle ---------------------------------------------------------------

def finite_diff_grad(f: Callable[[Array], float], x, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, one probe per component."""
    x = _as_array(x).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value in finite differences")
        gflat[k] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: Array, b: Array) -> float:
    """Worst-component error of two gradient arrays, relative to their scale.

    Arrays whose magnitude sits below the 1e-4 floor are compared
    absolutely against that floor: a relative criterion is meaningless for
    analytically-zero gradients where both sides are pure roundoff.
    """
    a, b = _as_array(a), _as_array(b)
    scale = max(float(np.max(np.abs(a), initial=0.0)),
                float(np.max(np.abs(b), initial=0.0)), 1e-4)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale
