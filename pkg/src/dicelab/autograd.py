"""Reverse-mode differentiation over a small closed set of numpy primitives.

Tensors wrap immutable numpy arrays. A :class:`GradTape` records every op
that touches a tensor with ``requires_grad`` while the tape is active, and
replays the records backward to produce gradients.

    with GradTape() as tape:
        loss = mean(mul(x, x))
    (gx,) = tape.gradient(loss, [x])

Storage is float32 by default; reductions accumulate in float64. Every op
preserves the dtype of its inputs, so a float64 model is differentiated in
float64 (which is what :func:`grad_check` relies on).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_state = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


class GradTape:
    """Ordered record of primitive ops for one forward/backward pass.

    A tape is single-owner: build it, call :meth:`gradient` once, drop it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each of ``params`` (zeros if untouched)."""
        if loss.data.size != 1:
            raise DimensionError(f"gradient needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype, copy=False)


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward)


# linear algebra / shape --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a ``(..., m, k)`` and b either ``(k, n)`` or batched like ``a``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if need_a:
            ga = g @ np.swapaxes(bd, -1, -2)
        if need_b:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# normalization / probability ---------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then apply gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs input {x.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * rstd).astype(x.dtype)
    rstd = rstd.astype(x.dtype)
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = _sum64(g * xhat, axis=lead)
        dbias = _sum64(g, axis=lead)
        dxhat = (g * gd).astype(np.float64)
        xh = xhat.astype(np.float64)
        dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xh * (dxhat * xh).mean(-1, keepdims=True))
        return dx.astype(x.dtype), dgain, dbias

    return _make(out, (x, gain, bias), backward)


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array softmax with max subtraction; normalizer summed in float64."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z.astype(np.float64))
    return (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = (x - np.max(x, axis=axis, keepdims=True)).astype(np.float64)
    return (z - np.log(np.exp(z).sum(axis=axis, keepdims=True))).astype(x.dtype)


def softmax(x: Tensor) -> Tensor:
    y = softmax_array(x.data)

    def backward(g):
        return (y * (g - _sum64(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    y = log_softmax_array(x.data)
    p = np.exp(y)

    def backward(g):
        return (g - p * _sum64(g, axis=-1, keepdims=True),)

    return _make(y, (x,), backward)


# selection ---------------------------------------------------------------------


def mask_fill(x: Tensor, mask: np.ndarray, fill: Tensor) -> Tensor:
    """Replace rows of ``x`` (``(..., D)``) where ``mask`` is true with the vector ``fill``.

    Unmasked rows never read ``fill``, so a NaN fill is harmless under an empty mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1] or fill.shape != x.shape[-1:]:
        raise DimensionError(f"mask_fill: mask {mask.shape}, fill {fill.shape}, input {x.shape}")
    m = mask[..., None]
    out = np.where(m, fill.data, x.data)

    def backward(g):
        gx = np.where(m, 0, g).astype(g.dtype)
        gf = _sum64(g[mask], axis=0) if mask.any() else np.zeros_like(fill.data)
        return gx, gf

    return _make(out, (x, fill), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor (masked-select once the mask is turned into indices)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward)


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """``x[n, labels[n]]`` for a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"pick: input {x.shape}, labels {labels.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, labels] = g
        return (gx,)

    return _make(x.data[rows, labels], (x,), backward)


# reductions --------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(_sum64(x.data), (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _make(_sum64(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.data.size)


# verification ------------------------------------------------------------------


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of tensors (same order as ``params``) to a scalar tensor.
    Everything is evaluated in float64. The error for one coordinate is
    ``|analytic - numeric| / max(|analytic|, 1e-8)``.
    """
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(p, requires_grad=True) for p in base]
    with GradTape() as tape:
        loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss at the base point")
    analytic = tape.gradient(loss, leaves)

    def evaluate(values: list[np.ndarray]) -> float:
        val = float(f([Tensor(v) for v in values]).data)
        if not math.isfinite(val):
            raise NumericError("grad_check: non-finite loss under perturbation")
        return val

    worst = 0.0
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = evaluate(base)
            flat[j] = orig - eps
            lo = evaluate(base)
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst
