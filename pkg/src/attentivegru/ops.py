"""Elementwise, reduction and shape ops with hand-written backward rules."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import Tensor, as_tensor, count_macs, note_branch, record

__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "sigmoid", "tanh", "relu",
    "softplus", "square", "sum", "mean", "reshape", "transpose", "concat",
    "stack", "getitem", "matmul", "softmax", "clip", "sorted_mean", "scatter_max",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(
        a.data * b.data, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # saturates to exactly 0 or 1 for large |x| without overflow warnings
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_branch(mask)
    return record(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    return record(out, (a,), lambda g: (g * _sigmoid(x),))


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    note_branch(inside)
    return record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def sorted_mean(a: Tensor) -> Tensor:
    """Mean over axis 0, summed in sorted order.

    The result is bitwise independent of the ordering of the slices along
    axis 0, which plain sequential summation does not guarantee.
    """
    n = a.shape[0]
    out = np.sort(a.data, axis=0).sum(axis=0) / n
    return record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return record(
        out, tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(a.data[index]), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    count_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return record(
        a.data @ b.data, (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), backward)


def scatter_max(values: Tensor, index: np.ndarray, n_slots: int) -> tuple[Tensor, np.ndarray]:
    """Row-wise max of ``values[P, C]`` grouped by ``index[P]`` into ``n_slots`` rows.

    Returns the pooled ``[n_slots, C]`` tensor (empty slots exactly zero) and
    the boolean occupancy mask. The gradient goes to the lowest-index point
    among ties.
    """
    index = np.asarray(index, dtype=np.int64)
    p, c = values.shape
    occupied = np.zeros(n_slots, dtype=bool)
    occupied[index] = True
    pooled = np.full((n_slots, c), -np.inf, dtype=values.dtype)
    np.maximum.at(pooled, index, values.data)
    pooled[~occupied] = 0.0
    hit = values.data == pooled[index]
    order = np.where(hit, np.arange(p)[:, None], p)
    winner = np.full((n_slots, c), p, dtype=np.int64)
    np.minimum.at(winner, index, order)
    note_branch(winner)
    chosen = hit & (winner[index] == np.arange(p)[:, None])

    def backward(g):
        return (g[index] * chosen,)

    return record(pooled, (values,), backward), occupied
