"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation records a closure mapping the output gradient to the input
gradients. :meth:`Tensor.backward` walks the recorded graph once, accumulates
into the ``grad`` of leaf tensors, and then drops the graph.

Negative infinity is accepted only by :func:`softmax` (it is how logits are
masked out); every other operation raises :class:`NonFiniteError` on it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateDistributionError,
    DegenerateVectorError,
    NonFiniteError,
    RankError,
    ShapeError,
)

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError("non-finite value reached an operation that only accepts finite input")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -------------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # reductions and shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.ndim != 0:
        raise RankError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
        node._parents = ()
        node._backward = None


# elementwise binary ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)
    out = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)
    pick_a = a.data >= b.data

    def fn(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return _result(np.where(pick_a, a.data, b.data), (a, b), fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, b.data)
    pick_a = a.data <= b.data

    def fn(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return _result(np.where(pick_a, a.data, b.data), (a, b), fn)


def matmul(a, b) -> Tensor:
    """Matrix product of the last two axes, batching over the leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _check_finite(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), fn)


# elementwise unary ----------------------------------------------------------


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)

    def fn(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    on = a.data > 0
    return _result(a.data * on, (a,), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    _check_finite(a.data)
    out = np.clip(a.data, lo, hi)
    live = out == a.data
    return _result(out, (a,), lambda g: (g * live,))


# reductions and shape -------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=axis), tuple(ts), fn)


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (may be ``-inf``)."""
    a = as_tensor(a)
    _check_finite(a.data)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _result(np.where(mask, value, a.data), (a,), lambda g: (g * keep,))


# softmax and friends --------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``-inf`` logits map to probability exactly 0."""
    x = as_tensor(x)
    if np.isnan(x.data).any() or np.isposinf(x.data).any():
        raise NonFiniteError("softmax input contains NaN or +inf")
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateDistributionError("every logit along the softmax axis is -inf")
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), fn)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_finite(x.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gh = g * weight.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gw, gb

    return _result(xhat * weight.data + bias.data, (x, weight, bias), fn)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(as_tensor(weight)))
    return y if bias is None else y + bias


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along ``axis`` (broadcasting)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise ShapeError(f"cosine_similarity length mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data**2).sum(axis=axis))
    nv = np.sqrt((v.data**2).sum(axis=axis))
    if (nu == 0).any() or (nv == 0).any():
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    dot = tsum(u * v, axis=axis)
    return dot / (sqrt(tsum(u * u, axis=axis)) * sqrt(tsum(v * v, axis=axis)))


def bilinear_sample(feature_map, locations) -> Tensor:
    """Bilinearly interpolate ``feature_map`` at fractional pixel ``locations``.

    ``feature_map`` is (B, H, W, D) and ``locations`` is (B, N, 2) holding
    (x, y) pixel coordinates; the result is (B, N, D). The unbatched form
    (H, W, D) with a (2,) location returns a (D,) vector. Locations outside
    the grid are clamped to the border, where the location gradient is zero.
    """
    fm, loc = as_tensor(feature_map), as_tensor(locations)
    if fm.ndim == 3 and loc.ndim == 1:
        out = bilinear_sample(reshape(fm, (1,) + fm.shape), reshape(loc, (1, 1, 2)))
        return reshape(out, (fm.shape[-1],))
    if fm.ndim != 4 or loc.ndim != 3 or loc.shape[-1] != 2 or loc.shape[0] != fm.shape[0]:
        raise ShapeError(f"bilinear_sample got feature map {fm.shape} and locations {loc.shape}")
    _check_finite(fm.data, loc.data)
    B, H, W, D = fm.shape
    if H < 2 or W < 2:
        raise ShapeError("bilinear_sample needs a grid of at least 2x2")
    x = np.clip(loc.data[..., 0], 0.0, W - 1.0)
    y = np.clip(loc.data[..., 1], 0.0, H - 1.0)
    live_x = x == loc.data[..., 0]
    live_y = y == loc.data[..., 1]
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    flat = fm.data.reshape(B * H * W, D)
    base = (np.arange(B)[:, None] * H + y0) * W + x0
    i00, i01, i10, i11 = base, base + 1, base + W, base + W + 1
    f00, f01, f10, f11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00, w01 = (1 - fy) * (1 - fx), (1 - fy) * fx
    w10, w11 = fy * (1 - fx), fy * fx
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    def fn(g):
        gfm = gloc = None
        if fm.requires_grad:
            acc = np.zeros((B * H * W, D))
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            vals = np.concatenate([(w * g).reshape(-1, D) for w in (w00, w01, w10, w11)])
            np.add.at(acc, idx, vals)
            gfm = acc.reshape(fm.shape)
        if loc.requires_grad:
            dx = ((1 - fy) * (f01 - f00) + fy * (f11 - f10)) * g
            dy = ((1 - fx) * (f10 - f00) + fx * (f11 - f01)) * g
            gloc = np.stack([dx.sum(-1) * live_x, dy.sum(-1) * live_y], axis=-1)
        return gfm, gloc

    return _result(out, (fm, loc), fn)


# gradient masks -------------------------------------------------------------


@dataclass(frozen=True)
class GradientMask:
    """Indices along ``axis`` of parameter ``target`` whose gradient is zeroed."""

    target: str
    indices: tuple[int, ...] = ()
    axis: int = 0


def apply_gradient_mask(grad, mask: GradientMask):
    """Return a copy of ``grad`` with the masked slices set to exactly zero."""
    arr = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    extent = arr.shape[mask.axis]
    for i in mask.indices:
        if not 0 <= i < extent:
            raise IndexError(f"mask index {i} out of range for axis of length {extent}")
    out = arr.copy()
    if mask.indices:
        sl = [slice(None)] * arr.ndim
        sl[mask.axis] = list(mask.indices)
        out[tuple(sl)] = 0.0
    return Tensor(out) if isinstance(grad, Tensor) else out


# finite differences ---------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Relative error between backprop and central differences.

    The error is measured on the concatenated gradient of all ``params``, so
    a parameter whose true gradient is exactly zero (a softmax bias, say)
    is judged against the scale of the whole gradient, not its own noise.
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.ravel() if p.grad is not None else np.zeros(p.data.size) for p in params]
    numeric = [numerical_gradient(fn, p, eps).ravel() for p in params]
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))
