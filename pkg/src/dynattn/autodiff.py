"""Reverse-mode differentiation over dense float64 numpy arrays.

A :class:`Tape` records every primitive whose inputs depend on a watched
tensor. Creation order is a topological order, so ``Tape.backward`` simply
walks the record in reverse. Tensors built only from constants are never
recorded, which lets the same forward code run for inference at no cost.

    tape = Tape()
    w = tape.watch(np.array([1.0, 2.0]))
    loss = reduce_sum(w * w)
    grads = tape.backward(loss)      # {w: array([2., 4.])}
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or infinity."""


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("data", "requires_grad", "tape", "parents", "pullback", "name")
    __array_priority__ = 100.0

    def __init__(self, data, *, tape: Tape | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.requires_grad = tape is not None
        self.parents: tuple[Tensor, ...] = ()
        self.pullback: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records primitive applications and replays them backwards once."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.watched: list[Tensor] = []
        self._consumed = False

    def watch(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=DTYPE, copy=True), tape=self, name=name)
        self.watched.append(t)
        return t

    def record(self, node: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); record a new forward pass")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of the scalar ``loss`` for every watched tensor.

        Watched tensors the loss does not depend on receive zeros.
        """
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("backward() needs a scalar Tensor loss")
        self._consumed = True
        grads: dict[int, np.ndarray] = {}
        if loss.tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.pullback(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for w in self.watched:
            g = grads.get(id(w))
            out[w] = np.zeros_like(w.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(w.shape)
        self.nodes = []
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(value, parents: Sequence[Tensor], pullback: Callable, op: str) -> Tensor:
    value = np.asarray(value, dtype=DTYPE)
    _check_finite(value, op)
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise RuntimeError(f"{op}: operands recorded on different tapes")
            tape = p.tape
    out = Tensor(value)
    if tape is not None:
        out.tape = tape
        out.requires_grad = True
        out.parents = tuple(parents)
        out.pullback = pullback
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data

    def pullback(g):
        ga = g / b.data
        gb = -g * value / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(value, (a, b), pullback, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data**exponent
    return _make(value, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "power")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "absolute")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# transcendental and activation functions


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    return _make(value, (a,), lambda g: (g * value,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    return _make(value, (a,), lambda g: (g / a.data,), "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log1p(a.data)
    return _make(value, (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    return _make(value, (a,), lambda g: (g * (1.0 - value * value),), "tanh")


def erf(a) -> Tensor:
    a = as_tensor(a)
    value = special.erf(a.data)
    return _make(
        value,
        (a,),
        lambda g: (g * (2.0 / math.sqrt(math.pi)) * np.exp(-a.data * a.data),),
        "erf",
    )


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal cdf."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.data)
    return _make(value, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    value = special.expit(a.data)
    return _make(value, (a,), lambda g: (g * value * (1.0 - value),), "sigmoid")


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    value = special.gammaln(a.data)
    return _make(value, (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "logaddexp")
    value = np.logaddexp(a.data, b.data)

    def pullback(g):
        wa = np.exp(a.data - value)
        wb = np.exp(b.data - value)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _make(value, (a, b), pullback, "logaddexp")


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    value = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(value, (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


def relu(a) -> Tensor:
    return clip(a, lo=0.0)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    value = np.where(mask, a.data, b.data)

    def pullback(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _make(value, (a, b), pullback, "where")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def pullback(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g) if bd.ndim == 2 else ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(value, (a, b), pullback, "matmul")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def pullback(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return _make(xhat, (a,), pullback, "layer_norm")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def pullback(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(value, ts, pullback, "concat")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    value = a.data[index]

    def pullback(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(value, copy=True), (a,), pullback, "getitem")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    value = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(value, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    value = np.broadcast_to(a.data, shape).copy()
    return _make(value, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(value, (a,), pullback, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(value.size, 1)

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(value, (a,), pullback, "reduce_mean")
