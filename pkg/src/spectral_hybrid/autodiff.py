"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` wraps an array and records how it was produced. Solver and
network code is written against plain numpy operators plus the functions in
this module, so the same code path runs either on raw arrays (fast, no tape)
or on ``Var`` objects (recorded, differentiable).

Gradients of complex intermediates use the convention
``g = dL/dRe(z) + 1j * dL/dIm(z)`` for a real scalar loss ``L``. Under this
convention the adjoint of ``y = a * z`` is ``conj(a) * g``.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import kernels

__all__ = [
    "Var",
    "NonDifferentiableError",
    "value",
    "fft",
    "ifft",
    "irfft",
    "real",
    "astype",
    "relu",
    "sum",
    "transpose",
    "reshape",
    "concatenate",
    "conv",
    "backward",
    "value_and_grad",
    "gradient",
]


class NonDifferentiableError(TypeError):
    """Raised when a recorded graph reaches an operation with no adjoint."""


def value(x):
    return x.value if isinstance(x, Var) else x


def _is_complex(a) -> bool:
    return np.iscomplexobj(a)


def _unbroadcast(g: np.ndarray, shape: tuple, like_complex: bool) -> np.ndarray:
    if not like_complex and np.iscomplexobj(g):
        g = g.real
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """An array node on the tape."""

    __slots__ = ("value", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op: str = "leaf"):
        self.value = np.asarray(value)
        self.parents = parents
        self.vjp = vjp
        self.op = op

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    dtype = property(lambda self: self.value.dtype)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, dtype={self.value.dtype})"

    def __len__(self):
        return len(self.value)

    # numpy must defer to us for mixed ndarray/Var arithmetic
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            fn = _UFUNCS.get(ufunc)
            if fn is not None:
                return fn(*inputs)
        raise NonDifferentiableError(f"operation '{ufunc.__name__}' is not differentiable")

    def __array_function__(self, func, types, args, kwargs):
        fn = _FUNCTIONS.get(func)
        if fn is None:
            raise NonDifferentiableError(f"operation '{func.__name__}' is not differentiable")
        return fn(*args, **kwargs)

    def __array__(self, dtype=None, copy=None):
        raise NonDifferentiableError("implicit conversion of a recorded value to ndarray")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negative(other))

    def __rsub__(self, other):
        return add(other, negative(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _divide(self, other)

    def __rtruediv__(self, other):
        return _divide(other, self)

    def __neg__(self):
        return negative(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, n):
        if n != 2:
            raise NonDifferentiableError("only squaring is supported")
        return multiply(self, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not isinstance(a, Var) and not isinstance(b, Var):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    ca, cb = _is_complex(av), _is_complex(bv)

    def vjp(g):
        return (_unbroadcast(g, sa, ca), _unbroadcast(g, sb, cb))

    return Var(out, (a, b), vjp, "add")


def negative(a):
    if not isinstance(a, Var):
        return -a
    return Var(-a.value, (a,), lambda g: (-g,), "negative")


def multiply(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not isinstance(a, Var) and not isinstance(b, Var):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    ca, cb = _is_complex(av), _is_complex(bv)

    def vjp(g):
        ga = _unbroadcast(np.conj(bv) * g, sa, ca) if isinstance(a, Var) else None
        gb = _unbroadcast(np.conj(av) * g, sb, cb) if isinstance(b, Var) else None
        return (ga, gb)

    return Var(out, (a, b), vjp, "multiply")


def _divide(a, b):
    if isinstance(b, Var):
        raise NonDifferentiableError("operation 'divide' by a recorded value is not differentiable")
    return multiply(a, 1.0 / np.asarray(b))


def getitem(a, index):
    out = a.value[index]
    shape, dtype = a.value.shape, a.value.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Var(out, (a,), vjp, "getitem")


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def _axes(ndim: int) -> tuple:
    return tuple(range(-ndim, 0))


def _grid_n(shape: tuple, ndim: int) -> int:
    n = shape[-1]
    if any(s != n for s in shape[-ndim:]):
        raise ValueError(f"transform axes must be equal, got {shape[-ndim:]}")
    return n


def _hermitian_rfft(x: np.ndarray, ndim: int) -> np.ndarray:
    """Full spectrum of a real array that is conjugate-symmetric to the last bit."""
    n = _grid_n(x.shape, ndim)
    m = n // 2
    half = np.fft.rfftn(x, axes=_axes(ndim))
    if ndim == 1:
        half[..., 0] = half[..., 0].real
        half[..., m] = half[..., m].real
        tail = np.conj(half[..., m - 1:0:-1])
    else:
        rev = (-np.arange(n)) % n
        for j in (0, m):
            col = half[..., j]
            half[..., j] = 0.5 * (col + np.conj(col[..., rev]))
        tail = np.conj(half[..., rev, m - 1:0:-1])
    return np.concatenate([half, tail], axis=-1)


def fft(x, ndim: int):
    """Forward transform over the trailing ``ndim`` axes, divided by the point count.

    Real input goes through a real-to-complex transform so the result is
    exactly conjugate-symmetric; otherwise round-off seeds a non-real
    component that unstable linear modes amplify.
    """
    xv = value(x)
    axes = _axes(ndim)
    scale = 1.0 / np.prod(xv.shape[-ndim:])
    cx = _is_complex(xv)
    out = (np.fft.fftn(xv, axes=axes) if cx else _hermitian_rfft(xv, ndim)) * scale
    if not isinstance(x, Var):
        return out

    def vjp(g):
        gx = np.fft.ifftn(g, axes=axes)
        return (gx if cx else gx.real,)

    return Var(out, (x,), vjp, "fft")


def irfft(c, ndim: int):
    """Real field from conjugate-symmetric coefficients (inverse of :func:`fft`).

    Only the non-negative last-axis half of ``c`` is read; on conjugate-symmetric
    input this equals ``real(ifft(c))`` and shares its adjoint.
    """
    cv = value(c)
    axes = _axes(ndim)
    n = _grid_n(cv.shape, ndim)
    scale = float(n ** ndim)
    out = np.fft.irfftn(cv[..., : n // 2 + 1], s=(n,) * ndim, axes=axes) * scale
    if not isinstance(c, Var):
        return out
    cc = _is_complex(cv)

    def vjp(g):
        gc = np.fft.fftn(g, axes=axes)
        return (gc if cc else gc.real,)

    return Var(out, (c,), vjp, "irfft")


def ifft(c, ndim: int):
    """Inverse of :func:`fft`; the result is complex, take :func:`real` for fields."""
    cv = value(c)
    axes = _axes(ndim)
    scale = float(np.prod(cv.shape[-ndim:]))
    out = np.fft.ifftn(cv, axes=axes) * scale
    if not isinstance(c, Var):
        return out
    cc = _is_complex(cv)

    def vjp(g):
        gc = np.fft.fftn(g, axes=axes)
        return (gc if cc else gc.real,)

    return Var(out, (c,), vjp, "ifft")


def real(z):
    if not isinstance(z, Var):
        return np.real(z)
    if not _is_complex(z.value):
        return z
    return Var(z.value.real.copy(), (z,), lambda g: (g.astype(z.value.dtype),), "real")


def astype(x, dtype):
    dtype = np.dtype(dtype)
    if not isinstance(x, Var):
        return np.asarray(x).astype(dtype, copy=False)
    if x.value.dtype == dtype:
        return x
    src = x.value.dtype
    if np.iscomplexobj(x.value):
        return Var(x.value.astype(dtype), (x,), lambda g: (g.astype(src),), "astype")
    return Var(x.value.astype(dtype), (x,), lambda g: (np.real(g).astype(src),), "astype")


def relu(x):
    xv = value(x)
    mask = xv > 0
    out = np.where(mask, xv, 0).astype(xv.dtype, copy=False)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * mask,), "relu")


def sum(x, axis=None, keepdims=False):
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(out, (x,), vjp, "sum")


def transpose(x, axes=None):
    xv = value(x)
    out = np.transpose(xv, axes)
    if not isinstance(x, Var):
        return out
    inv = None if axes is None else np.argsort(axes)
    return Var(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape):
    xv = value(x)
    out = np.reshape(xv, shape)
    if not isinstance(x, Var):
        return out
    src = xv.shape
    return Var(out, (x,), lambda g: (np.reshape(g, src),), "reshape")


def concatenate(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(x, Var) for x in xs):
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    flags = [_is_complex(v) for v in vals]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if c else np.real(p) for p, c in zip(parts, flags))

    return Var(out, tuple(xs), vjp, "concatenate")


def stack(xs, axis=0):
    return concatenate([expand_dims(x, axis) for x in xs], axis=axis)


def expand_dims(x, axis):
    xv = value(x)
    return reshape(x, np.expand_dims(xv, axis).shape)


def conv(x, w, dilation: int = 1):
    """Periodic dilated convolution, channel-last; see :mod:`spectral_hybrid.kernels`."""
    xv, wv = value(x), value(w)
    out = kernels.conv_forward(xv, wv, dilation)
    if not isinstance(x, Var) and not isinstance(w, Var):
        return out

    def vjp(g):
        gx, gw = kernels.conv_backward(xv, wv, g, dilation,
                                       need_input=isinstance(x, Var))
        return (gx, gw)

    return Var(out, (x, w), vjp, "conv")


_UFUNCS = {
    np.add: add,
    np.subtract: lambda a, b: add(a, negative(b)),
    np.multiply: multiply,
    np.negative: negative,
    np.true_divide: lambda a, b: _divide(a, b),
    np.real: real,
    np.square: lambda a: multiply(a, a),
}

_FUNCTIONS = {
    np.sum: sum,
    np.real: real,
    np.transpose: transpose,
    np.reshape: reshape,
    np.concatenate: concatenate,
    np.stack: stack,
    np.expand_dims: expand_dims,
}


def _toposort(root: Var) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Var, leaves) -> list:
    """Reverse sweep from a scalar ``root``; returns gradients for ``leaves``."""
    if root.value.size != 1:
        raise ValueError("backward() needs a scalar output")
    grads = {id(root): np.ones_like(root.value)}
    wanted = {id(v) for v in leaves}
    kept = {}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            kept[id(node)] = g
        if node.vjp is None:
            continue
        for parent, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not isinstance(parent, Var):
                continue
            key = id(parent)
            grads[key] = gp if key not in grads else grads[key] + gp
    return [kept.get(id(v), np.zeros_like(v.value)) for v in leaves]


def value_and_grad(loss_fn: Callable, params: Mapping[str, np.ndarray], *args, **kwargs):
    """Evaluate ``loss_fn(params, ...)`` and its gradient w.r.t. every entry of ``params``.

    ``loss_fn`` may return ``(loss, aux)``; aux is passed through untouched.
    """
    leaves = {k: Var(v) for k, v in params.items()}
    out = loss_fn(leaves, *args, **kwargs)
    aux = None
    if isinstance(out, tuple):
        out, aux = out
    if not isinstance(out, Var):
        zero = {k: np.zeros_like(v) for k, v in params.items()}
        return (float(np.real(out)), zero) if aux is None else (float(np.real(out)), zero, aux)
    names = list(leaves)
    gs = backward(out, [leaves[k] for k in names])
    grads = {k: g.astype(params[k].dtype, copy=False) for k, g in zip(names, gs)}
    loss = float(np.real(out.value))
    return (loss, grads) if aux is None else (loss, grads, aux)


def gradient(loss_fn: Callable, params: Mapping[str, np.ndarray], *args, **kwargs) -> dict:
    return value_and_grad(loss_fn, params, *args, **kwargs)[1]
