"""Differentiable primitives over :class:`Tensor`.

Every function here computes its forward value with numpy and registers a
closure that maps the output gradient back to its inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, record_op

# Added to disallowed attention scores before normalisation.
MASK_FILL = -1e9


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return record_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics, ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record_op(out, parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return record_op(np.where(on, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                     lambda g: (g * on,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record_op(out, (x,), lambda g: (g * sig,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return record_op(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:  # no repeated positions, plain assignment is exact
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op(np.array(out, copy=True), (x,), backward)


def expand(x, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape``; the gradient sums back over copies."""
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return record_op(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op(out, tuple(tensors), backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def masked_softmax(scores, mask=None) -> Tensor:
    """Softmax over the last axis with boolean ``mask`` (True = allowed).

    ``mask`` broadcasts against the trailing ``(q, k)`` or ``(h, q, k)`` axes
    of ``scores``. Disallowed entries come out exactly zero, and an all-true
    mask reproduces the unmasked result bit for bit.
    """
    scores = as_tensor(scores)
    s = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not _broadcastable(mask.shape, s.shape):
            raise DimensionError(f"masked_softmax: mask {mask.shape} vs scores {s.shape}")
        dead = ~mask.any(axis=-1)
        if dead.any():
            row = tuple(int(i) for i in np.argwhere(dead)[0])
            raise ConfigError(f"masked_softmax: row {row} has no allowed entries")
        s = np.where(mask, s, MASK_FILL)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record_op(p, (scores,), backward)


def _broadcastable(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    try:
        return np.broadcast_shapes(small, big) == big
    except ValueError:
        return False


def softmax(scores) -> Tensor:
    return masked_softmax(scores, None)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalise the trailing axis to zero mean / unit variance, then scale and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / shift {shift.shape} vs input {x.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + shift.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gshift = flat_g.sum(axis=0) if shift.requires_grad else None
        return gx, ggain, gshift

    return record_op(out, (x, gain, shift), backward)


def l1_mean(a, b) -> Tensor:
    """Mean over rows of per-row L1 distances.

    For inputs shaped ``(..., n, d)`` the result has shape ``(...)``:
    ``sum(|a - b|) / n`` for each leading index.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_mean: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise DimensionError(f"l1_mean: expected (n, d) rows, got {a.shape}")
    diff = a.data - b.data
    n = a.shape[-2]
    out = np.abs(diff).sum(axis=(-2, -1)) / n
    sign = np.sign(diff)

    def backward(g):
        ga = sign * (np.asarray(g)[..., None, None] / n)
        return ga, -ga

    return record_op(np.asarray(out), (a, b), backward)
