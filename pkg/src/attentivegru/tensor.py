"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable op appends one record ``(output, inputs, backward_fn)``
to the thread's active tape. :func:`backward_pass` replays the tape in reverse
exactly once and then clears it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "backward_pass",
    "no_grad",
    "grad_enabled",
    "active_tape",
    "record",
    "mac_counter",
    "count_macs",
    "branch_recorder",
    "note_branch",
]

_local = threading.local()


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self) -> None:
        self.records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# -- multiply-accumulate instrumentation ------------------------------------


class _MacCounter:
    def __init__(self) -> None:
        self.total = 0

    def __int__(self) -> int:
        return self.total


@contextlib.contextmanager
def mac_counter():
    """Count multiply-accumulates of contraction ops run inside the block."""
    stack = getattr(_local, "macs", None)
    if stack is None:
        stack = _local.macs = []
    counter = _MacCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def count_macs(n: int) -> None:
    for counter in getattr(_local, "macs", ()) or ():
        counter.total += int(n)


# -- discrete-branch recording (used by the gradient checker) ----------------


@contextlib.contextmanager
def branch_recorder():
    """Collect the discrete decisions (gates, kinks) taken by ops in the block."""
    prev = getattr(_local, "branches", None)
    log: list[bytes] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def note_branch(decision: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.ascontiguousarray(decision).tobytes())


# -- tensor -----------------------------------------------------------------


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and put it on the tape when any input needs a gradient.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    ``None``) per input, in order.
    """
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        active_tape().records.append((out, tuple(inputs), backward))
    return out


def backward_pass(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss``.

    Gradients sum over consumers in tape order. The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward_pass needs a scalar loss, got shape {loss.shape}")
    tape = active_tape() if tape is None else tape
    loss.grad = np.ones_like(loss.data)
    try:
        for out, inputs, fn in reversed(tape.records):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.dtype)
                if gi.shape != inp.shape:
                    raise RuntimeError(
                        f"gradient shape {gi.shape} does not match tensor shape {inp.shape}"
                    )
                inp.grad = gi if inp.grad is None else inp.grad + gi
        for _, inputs, _ in tape.records:
            for inp in inputs:
                if inp.requires_grad and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
    finally:
        tape.clear()


def iter_unique(tensors: Iterable[Tensor]) -> list[Tensor]:
    seen: set[int] = set()
    out = []
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out
