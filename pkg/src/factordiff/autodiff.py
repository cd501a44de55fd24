"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

``Var`` wraps an ndarray and records, for each produced value, its parent
``Var`` nodes and a closure that maps the upstream gradient to per-parent
gradients.  ``backward`` replays those closures in reverse topological
order.  Anything that is not a ``Var`` (floats, ndarrays) is treated as a
constant and receives no gradient.

The functional helpers (``exp``, ``sqrt``, ``sigmoid``, ``softmax``, ...)
dispatch on type, so the same model code runs on plain arrays during
inference and on ``Var`` during training.  All math is float64; operations
are plain numpy calls executed in a fixed order, which keeps gradient
accumulation bit-reproducible.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Var",
    "raw",
    "backward",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "tanh",
    "softmax",
    "sum_",
    "mean_",
    "concat",
    "stack_rows",
    "dot",
    "norm",
    "affine",
]


def raw(x):
    """Underlying ndarray (or scalar) of ``x``, unwrapping ``Var``."""
    return x.data if isinstance(x, Var) else x


def _as_array(x) -> np.ndarray:
    return np.asarray(raw(x), dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast relative to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A float64 array plus tape bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    # Make ndarray <op> Var defer to our reflected operators instead of
    # numpy attempting an elementwise object broadcast.
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Var({self.data!r})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            ov = other.data
            def bwd(g):
                return (_unbroadcast(g, self.data.shape), _unbroadcast(g, ov.shape))
            return Var(self.data + ov, (self, other), bwd)
        out = self.data + other
        def bwd(g):
            return (_unbroadcast(g, self.data.shape),)
        return Var(out, (self,), bwd)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        def bwd(g):
            return (-g,)
        return Var(-self.data, (self,), bwd)

    def __sub__(self, other):
        if isinstance(other, Var):
            ov = other.data
            def bwd(g):
                return (_unbroadcast(g, self.data.shape), _unbroadcast(-g, ov.shape))
            return Var(self.data - ov, (self, other), bwd)
        out = self.data - other
        def bwd(g):
            return (_unbroadcast(g, self.data.shape),)
        return Var(out, (self,), bwd)

    def __rsub__(self, other):
        def bwd(g):
            return (_unbroadcast(-g, self.data.shape),)
        return Var(other - self.data, (self,), bwd)

    def __mul__(self, other):
        if isinstance(other, Var):
            ov, sd = other.data, self.data
            def bwd(g):
                return (_unbroadcast(g * ov, sd.shape), _unbroadcast(g * sd, ov.shape))
            return Var(sd * ov, (self, other), bwd)
        out = self.data * other
        def bwd(g):
            return (_unbroadcast(g * other, self.data.shape),)
        return Var(out, (self,), bwd)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            ov, sd = other.data, self.data
            def bwd(g):
                return (
                    _unbroadcast(g / ov, sd.shape),
                    _unbroadcast(-g * sd / (ov * ov), ov.shape),
                )
            return Var(sd / ov, (self, other), bwd)
        out = self.data / other
        def bwd(g):
            return (_unbroadcast(g / other, self.data.shape),)
        return Var(out, (self,), bwd)

    def __rtruediv__(self, other):
        sd = self.data
        def bwd(g):
            return (_unbroadcast(-g * other / (sd * sd), sd.shape),)
        return Var(other / sd, (self,), bwd)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        p = float(p)
        sd = self.data
        def bwd(g):
            return (g * p * sd ** (p - 1.0),)
        return Var(sd ** p, (self,), bwd)

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    @property
    def T(self):
        def bwd(g):
            return (g.T,)
        return Var(self.data.T, (self,), bwd)

    @property
    def mT(self):
        """Swap the last two axes (batched matrix transpose)."""
        def bwd(g):
            return (np.swapaxes(g, -1, -2),)
        return Var(np.swapaxes(self.data, -1, -2), (self,), bwd)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        def bwd(g):
            return (g.reshape(old),)
        return Var(self.data.reshape(shape), (self,), bwd)

    def __getitem__(self, idx):
        old_shape = self.data.shape
        def bwd(g):
            full = np.zeros(old_shape)
            full[idx] = g
            return (full,)
        return Var(self.data[idx], (self,), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)
        return Var(out, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _matmul(a, b):
    av, bv = _as_array(a), _as_array(b)
    out = av @ bv
    a_is, b_is = isinstance(a, Var), isinstance(b, Var)

    def grad_a(g):
        if av.ndim == 3:  # batched: (B,n,k) @ (B,k,m) or (B,n,k) @ (k,m)
            return g @ np.swapaxes(bv, -1, -2) if bv.ndim == 3 else g @ bv.T
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv)
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g
        return g * bv  # both 1-D: scalar output

    def grad_b(g):
        if av.ndim == 3:
            if bv.ndim == 3:
                return np.swapaxes(av, -1, -2) @ g
            return np.tensordot(av, g, axes=([0, 1], [0, 1]))  # shared 2-D weight
        if av.ndim == 2 and bv.ndim == 2:
            return av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return np.outer(av, g)
        return g * av

    if a_is and b_is:
        def bwd(g):
            return (grad_a(g), grad_b(g))
        return Var(out, (a, b), bwd)
    if a_is:
        def bwd(g):
            return (grad_a(g),)
        return Var(out, (a,), bwd)
    if b_is:
        def bwd(g):
            return (grad_b(g),)
        return Var(out, (b,), bwd)
    return out


# -- elementwise functions (dual dispatch) ------------------------------------


def exp(x):
    if not isinstance(x, Var):
        return np.exp(_as_array(x))
    out = np.exp(x.data)
    def bwd(g):
        return (g * out,)
    return Var(out, (x,), bwd)


def log(x):
    if not isinstance(x, Var):
        return np.log(_as_array(x))
    sd = x.data
    def bwd(g):
        return (g / sd,)
    return Var(np.log(sd), (x,), bwd)


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(_as_array(x))
    out = np.sqrt(x.data)
    def bwd(g):
        return (g * 0.5 / out,)
    return Var(out, (x,), bwd)


def sigmoid(x):
    xv = raw(x)
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if not isinstance(x, Var):
        return out
    def bwd(g):
        return (g * out * (1.0 - out),)
    return Var(out, (x,), bwd)


def silu(x):
    """Sigmoid-weighted linear unit, x * sigmoid(x); smooth everywhere."""
    s = sigmoid(raw(x))
    out = raw(x) * s
    if not isinstance(x, Var):
        return out
    xv = x.data
    def bwd(g):
        return (g * (s + xv * s * (1.0 - s)),)
    return Var(out, (x,), bwd)


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(_as_array(x))
    out = np.tanh(x.data)
    def bwd(g):
        return (g * (1.0 - out * out),)
    return Var(out, (x,), bwd)


def softmax(x, axis=-1):
    """Row-stochastic softmax; the shift by the (detached) max is exact."""
    shift = np.max(raw(x), axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / sum_(e, axis=axis, keepdims=True)


# -- reductions / structure (dual dispatch) -----------------------------------


def sum_(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return x.sum(axis=axis, keepdims=keepdims)
    return _as_array(x).sum(axis=axis, keepdims=keepdims)


def mean_(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return x.mean(axis=axis, keepdims=keepdims)
    return _as_array(x).mean(axis=axis, keepdims=keepdims)


def concat(parts: Sequence, axis=0):
    if not any(isinstance(p, Var) for p in parts):
        return np.concatenate([_as_array(p) for p in parts], axis=axis)
    vars_ = [p if isinstance(p, Var) else Var(p) for p in parts]
    datas = [v.data for v in vars_]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))
    return Var(out, tuple(vars_), bwd)


def stack_rows(rows: Sequence):
    """Stack 1-D values into a 2-D matrix, one row each."""
    return concat([r.reshape(1, -1) if isinstance(r, Var)
                   else _as_array(r).reshape(1, -1) for r in rows], axis=0)


def dot(a, b):
    return sum_(a * b)


def norm(x):
    return sqrt(sum_(x * x))


def affine(x, w, b):
    """Fused x @ w + b with a shared 2-D weight; one tape node instead of two.

    ``x`` may be 1-D, 2-D, or batched 3-D; ``w`` and ``b`` may be Var
    parameters or constants, with the bias broadcasting over rows.
    """
    if not (isinstance(x, Var) or isinstance(w, Var) or isinstance(b, Var)):
        return raw(x) @ raw(w) + raw(b)
    xv, wv, bv = raw(x), raw(w), raw(b)
    out = xv @ wv + bv
    parents, slots = [], []
    for name, v in (("x", x), ("w", w), ("b", b)):
        if isinstance(v, Var):
            parents.append(v)
            slots.append(name)

    def bwd(g):
        gs = []
        for name in slots:
            if name == "x":
                gs.append(g @ wv.T if xv.ndim >= 2 else wv @ g)
            elif name == "w":
                if xv.ndim == 3:
                    gs.append(np.tensordot(xv, g, axes=([0, 1], [0, 1])))
                elif xv.ndim == 2:
                    gs.append(xv.T @ g)
                else:
                    gs.append(np.outer(xv, g))
            else:
                gs.append(_unbroadcast(g, bv.shape))
        return tuple(gs)

    return Var(out, tuple(parents), bwd)


# -- the tape ------------------------------------------------------------------


def _toposort(root: Var) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
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
    return order


def backward(root: Var, seed=None) -> None:
    """Populate ``.grad`` on every node reachable from ``root``.

    ``seed`` is the upstream gradient of ``root`` (defaults to ones, i.e.
    d root / d root).  Grads of reachable nodes are reset first, so repeated
    calls are independent.  Nodes that end up with no contribution keep
    grad = None; leaves read it as zero.
    """
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = (np.ones_like(root.data) if seed is None
                 else np.asarray(seed, dtype=np.float64).reshape(root.data.shape))
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
