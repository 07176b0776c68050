"""Reverse-mode tensor engine on top of numpy.

Every op evaluates eagerly. While a Tape is active, each op also records a
closure mapping the output gradient to input gradients; backward() walks the
tape once in reverse and accumulates gradients additively wherever a tensor
fans out. Gradient arrays are only ever rebound, never mutated in place, so
closures may hand back views without aliasing bugs.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """n-dimensional float array with an optional same-shape gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic; non-Tensor operands are constants and receive no gradient
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)


class Tape:
    """Ordered record of ops executed under record_into()."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_TAPES: list[Tape] = []


@contextlib.contextmanager
def record_into(tape: Tape):
    """Route op recording to `tape` for the duration of the block."""
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def _record(out: Tensor, inputs: tuple[Tensor, ...], back: Callable) -> None:
    if _TAPES:
        _TAPES[-1].records.append((out, inputs, back))


def backward(loss: Tensor, tape: Tape) -> None:
    """Seed d(loss)/d(loss)=1 and push gradients back through the tape.

    Each recorded op is visited exactly once, newest first. Ops whose output
    gradient never materialized (dead branches) are skipped.
    """
    if loss.data.shape != ():
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, inputs, back in reversed(tape.records):
        if out.grad is None:
            continue
        grads = back(out.grad)
        for tensor, grad in zip(inputs, grads):
            if grad is None:
                continue
            if tensor.grad is None:
                tensor.grad = grad
            else:
                tensor.grad = tensor.grad + grad


def zero_grads(tensors) -> None:
    """Install zero gradient arrays so untouched tensors read as exactly zero."""
    for t in _iter_tensors(tensors):
        t.grad = np.zeros_like(t.data)


def clear_grads(tensors) -> None:
    for t in _iter_tensors(tensors):
        t.grad = None


def _iter_tensors(tensors):
    if isinstance(tensors, dict):
        return tensors.values()
    return tensors


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        out = Tensor(a.data + c)
        _record(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))
        return out
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                    _unbroadcast(g, b.data.shape)))
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        out = Tensor(a.data - c)
        _record(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))
        return out
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                    _unbroadcast(-g, b.data.shape)))
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        out = Tensor(a.data * c)
        _record(out, (a,), lambda g: (_unbroadcast(g * c, a.data.shape),))
        return out
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    _record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape),
                                    _unbroadcast(g * ad, bd.shape)))
    return out


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        out = Tensor(a.data / c)
        _record(out, (a,), lambda g: (_unbroadcast(g / c, a.data.shape),))
        return out
    ad, bd = a.data, b.data
    out = Tensor(ad / bd)

    def back(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    _record(out, (a, b), back)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def texp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    od = out.data
    _record(out, (a,), lambda g: (g * od,))
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU: 0.5*x*(1+erf(x/sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    local = cdf + x * pdf
    _record(out, (a,), lambda g: (g * local,))
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        back = lambda g: (np.transpose(g),)
    else:
        inverse = tuple(np.argsort(axes))
        back = lambda g: (np.transpose(g, inverse),)
    _record(out, (a,), back)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(out, tuple(tensors), back)
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows a[idx]; duplicate indices accumulate gradient additively."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def back(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    _record(out, (a,), back)
    return out


def scatter_rows(rows: Tensor, idx, length: int) -> Tensor:
    """Place rows at positions idx of a zero buffer of `length` rows."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ShapeMismatch("scatter_rows requires unique indices")
    buf = np.zeros((length,) + rows.data.shape[1:], dtype=rows.data.dtype)
    buf[idx] = rows.data
    out = Tensor(buf)
    _record(out, (rows,), lambda g: (g[idx],))
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} x {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        if not (ad.ndim == 2 and bd.ndim == 2):
            raise ShapeMismatch(f"matmul batch dims differ: {ad.shape} x {bd.shape}")
    out = Tensor(ad @ bd)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    _record(out, (a, b), back)
    return out


# ---------------------------------------------------------------------------
# reductions


def _reduce_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))
    shape = a.data.shape
    axes = _reduce_axes(axis, a.data.ndim)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    _record(out, (a,), back)
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.mean(axis=axis))
    shape = a.data.shape
    axes = _reduce_axes(axis, a.data.ndim)
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).copy(),)

    _record(out, (a,), back)
    return out


# ---------------------------------------------------------------------------
# softmax family, layer norm, unit normalization


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def back(g):
        inner = (p * g).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    _record(out, (a,), back)
    return out


def masked_softmax(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax over positions where mask is True; masked entries get weight 0.

    Computed without injecting -inf into tensor values, so outputs stay
    finite. Every slice along `axis` must keep at least one allowed entry.
    """
    x = a.data
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=axis).all():
        raise ShapeMismatch("masked_softmax: a row has no allowed entries")
    lowest = np.finfo(x.dtype).min
    top = np.where(m, x, lowest).max(axis=axis, keepdims=True)
    # masked entries are zeroed before exp so huge disallowed values cannot overflow
    e = np.exp(np.where(m, x - top, 0.0)) * m
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def back(g):
        inner = (p * g).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    _record(out, (a,), back)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale+shift."""
    x = a.data
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatch(f"layer_norm gain/bias must be shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def back(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gxh = g * gd
        gx = inv * (gxh
                    - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    _record(out, (a, gain, bias), back)
    return out


def unit_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit Euclidean norm (eps keeps zero vectors finite)."""
    x = a.data
    s2 = (x * x).sum(axis=-1, keepdims=True) + eps
    s = np.sqrt(s2)
    y = x / s
    out = Tensor(y)

    def back(g):
        dot = (g * x).sum(axis=-1, keepdims=True)
        return (g / s - x * dot / (s2 * s),)

    _record(out, (a,), back)
    return out


# ---------------------------------------------------------------------------
# cross entropy


def cross_entropy(logits: Tensor, targets, positions) -> Tensor:
    """Mean negative log-likelihood of targets at the given row positions.

    logits: [T, V]; targets: int ids of length T (rows outside `positions`
    are ignored); positions: non-empty subset of [0, T).
    """
    positions = np.asarray(positions, dtype=np.intp)
    targets = np.asarray(targets, dtype=np.intp)
    x = logits.data
    if x.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects [T, V] logits, got {x.shape}")
    t, v = x.shape
    if positions.size == 0:
        raise ShapeMismatch("cross_entropy: empty position set")
    if positions.min() < 0 or positions.max() >= t:
        raise ShapeMismatch(f"cross_entropy: positions outside [0, {t})")
    if targets.shape != (t,):
        raise ShapeMismatch(f"cross_entropy: targets must have length {t}")
    picked = targets[positions]
    if picked.min() < 0 or picked.max() >= v:
        raise ShapeMismatch(f"cross_entropy: target id outside [0, {v})")

    rows = x[positions]
    m = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - m)
    z = e.sum(axis=1)
    lse = m[:, 0] + np.log(z)
    k = positions.size
    out = Tensor(np.asarray((lse - rows[np.arange(k), picked]).mean(), dtype=x.dtype))

    def back(g):
        p = e / z[:, None]
        p[np.arange(k), picked] -= 1.0
        buf = np.zeros_like(x)
        np.add.at(buf, positions, p * (g / k))
        return (buf,)

    _record(out, (logits,), back)
    return out
