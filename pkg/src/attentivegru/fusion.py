"""AttentiveGRU temporal fusion: attention gating plus gated state integration.

Shapes: one BEV state is ``[1, D, H, W]``; per-query tensors stack the M
latent queries on the batch axis, ``[M, D, H, W]``, so the 1x1 gate and
candidate convolutions (shared by all queries of a block) run as one batched
convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .conv import avg_pool2d, deform_conv2d, resize_bilinear
from .nn import Conv2d, Module, he_normal
from .ops import _sigmoid
from .tensor import Tensor, note_branch, parameter, record

MODES = ("default", "sparse_fast")


class FusionBlock(Module):
    """Parameters of one temporal fusion block."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, n_queries: int = 32,
                 kernel: int = 3, stride: int = 1, mode: str = "default", dtype=np.float64):
        if mode not in MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
        if stride not in (1, 2):
            raise ValueError("block stride must be 1 or 2")
        self.queries = parameter(rng.normal(0.0, 1.0, (n_queries, dim)), dtype=dtype)
        self.key_present = Conv2d(rng, dim, dim, 1, gain=1.0, dtype=dtype)
        self.key_memory = Conv2d(rng, dim, dim, 1, gain=1.0, dtype=dtype)
        self.gate_reset = Conv2d(rng, 2 * dim, dim, 1, gain=1.0, dtype=dtype)
        self.gate_update = Conv2d(rng, 2 * dim, dim, 1, gain=1.0, dtype=dtype)
        self.candidate = Conv2d(rng, 2 * dim, dim, 1, gain=1.0, dtype=dtype)
        self.deform_weight = parameter(he_normal(rng, (dim, dim, kernel, kernel), dim * kernel * kernel, 1.0),
                                       dtype=dtype)
        self.deform_bias = parameter(np.zeros(dim), dtype=dtype)
        # offsets start at zero so the block begins as a plain convolution
        self.offset_pred = Conv2d(rng, dim, 2 * kernel * kernel, 3, dtype=dtype)
        self.offset_pred.weight.data[...] = 0.0
        self.threshold_offset = parameter(np.zeros(()), dtype=dtype)
        self.dim = dim
        self.kernel = kernel
        self.stride = stride
        self.mode = mode
        self.straight_through = True

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]


# -- attention gating --------------------------------------------------------


def concurrent_cross_attention(queries: Tensor, present: Tensor, memory: Tensor,
                               block: FusionBlock) -> tuple[Tensor, Tensor]:
    """Scaled dot-product scores of every query against present and memory keys.

    Both key sets are concatenated along the location axis so one matrix
    product serves both states. Returns ``[M, HW]`` scores for each state.
    """
    _, d, h, w = present.shape
    k1 = ops.reshape(block.key_present(present), (d, h * w))
    k2 = ops.reshape(block.key_memory(memory), (d, h * w))
    keys = ops.concat([k1, k2], axis=1)
    scores = ops.div(ops.matmul(queries, keys), math.sqrt(d))
    hw = h * w
    return (ops.getitem(scores, (slice(None), slice(0, hw))),
            ops.getitem(scores, (slice(None), slice(hw, 2 * hw))))


def attention_gate(scores: Tensor, threshold_offset: Tensor, straight_through: bool = True) -> Tensor:
    """Binary gates: 1 where ``sigmoid(score) >= median + threshold_offset`` per query row.

    With ``straight_through`` the backward pass treats the threshold as the
    identity: d gate / d score = sigmoid'(score) and d gate / d offset = -1.
    Without it the (almost everywhere exact) zero derivative is used.
    """
    s = _sigmoid(scores.data)
    med = np.median(s, axis=1, keepdims=True)
    gate = (s >= med + threshold_offset.data).astype(scores.dtype)
    note_branch(gate)

    def backward(g):
        if not straight_through:
            return (np.zeros_like(scores.data), np.zeros_like(threshold_offset.data))
        return (g * s * (1.0 - s), np.asarray(-g.sum()).reshape(threshold_offset.shape))

    return record(gate, (scores, threshold_offset), backward)


@dataclass
class GatePair:
    present: Tensor  # [M, HW], entries in {0, 1}
    memory: Tensor


def gate_pair(present_scores: Tensor, memory_scores: Tensor, block: FusionBlock) -> GatePair:
    return GatePair(
        attention_gate(present_scores, block.threshold_offset, block.straight_through),
        attention_gate(memory_scores, block.threshold_offset, block.straight_through),
    )


def apply_gates(present: Tensor, memory: Tensor, gates: GatePair) -> tuple[Tensor, Tensor]:
    """Per-query gated states ``(h_prev_q, x_q)``, each ``[M, D, H, W]``."""
    _, _, h, w = present.shape
    m = gates.present.shape[0]
    g_p = ops.reshape(gates.present, (m, 1, h, w))
    g_m = ops.reshape(gates.memory, (m, 1, h, w))
    return ops.mul(g_m, memory), ops.mul(g_p, present)


# -- state integration -------------------------------------------------------


def integrate_states(h_prev: Tensor, x: Tensor, block: FusionBlock,
                     update_override: float | None = None) -> Tensor:
    """Gated GRU-style update, before the deformable convolution.

    ``update_override`` pins the update gate to a constant (0 keeps the
    memory, 1 takes the candidate).
    """
    if h_prev.shape != x.shape or h_prev.shape[1] != block.dim:
        raise ValueError(f"state_integration channel mismatch: {h_prev.shape} vs {x.shape}, D={block.dim}")
    composite = ops.concat([h_prev, x], axis=1)
    reset = ops.sigmoid(block.gate_reset(composite))
    if update_override is None:
        update = ops.sigmoid(block.gate_update(composite))
    else:
        update = Tensor(np.full(x.shape, update_override, dtype=x.dtype))
    cand = ops.tanh(block.candidate(ops.concat([ops.mul(reset, h_prev), x], axis=1)))
    return ops.add(ops.mul(ops.sub(1.0, update), h_prev), ops.mul(update, cand))


def deform(h: Tensor, block: FusionBlock) -> Tensor:
    offsets = block.offset_pred(h)
    return deform_conv2d(h, block.deform_weight, offsets, block.deform_bias)


def state_integration(h_prev: Tensor, x: Tensor, block: FusionBlock) -> Tensor:
    return deform(integrate_states(h_prev, x, block), block)


# -- blocks and layer --------------------------------------------------------


def _as_state(x: Tensor) -> Tensor:
    return ops.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def fusion_block_forward(present: Tensor, memory: Tensor, block: FusionBlock,
                         mode: str | None = None) -> Tensor:
    """One block: gate, integrate per query, deform and average over queries.

    ``default`` deforms every query's state and then averages; ``sparse_fast``
    averages first and deforms once. Returns ``[1, D, H', W']`` at the block's
    own resolution.
    """
    mode = block.mode if mode is None else mode
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    present, memory = _as_state(present), _as_state(memory)
    if block.stride == 2:
        present, memory = avg_pool2d(present, 2), avg_pool2d(memory, 2)
    scores_p, scores_m = concurrent_cross_attention(block.queries, present, memory, block)
    h_prev_q, x_q = apply_gates(present, memory, gate_pair(scores_p, scores_m, block))
    fused = integrate_states(h_prev_q, x_q, block)
    if mode == "default":
        return ops.reshape(ops.sorted_mean(deform(fused, block)), (1,) + fused.shape[1:])
    return deform(ops.reshape(ops.sorted_mean(fused), (1,) + fused.shape[1:]), block)


class FusionLayer(Module):
    """N fusion blocks sharing one memory buffer, run recurrently over frames."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, n_queries: int = 32, n_blocks: int = 3,
                 kernel: int = 3, mode: str = "default", strides: Sequence[int] | None = None,
                 dtype=np.float64):
        strides = [1] * n_blocks if strides is None else list(strides)
        if len(strides) != n_blocks:
            raise ValueError("need one stride per block")
        self.blocks = [FusionBlock(rng, dim, n_queries, kernel, s, mode, dtype) for s in strides]
        self._state_bytes = 0

    @property
    def state_bytes(self) -> int:
        """Bytes held by the recurrent memory buffer during the last forward."""
        return self._state_bytes

    def set_straight_through(self, enabled: bool) -> None:
        for b in self.blocks:
            b.straight_through = enabled

    def step(self, present: Tensor, memory: Tensor) -> Tensor:
        present = _as_state(present)
        size = present.shape[2:]
        outs = [resize_bilinear(fusion_block_forward(present, memory, b), size) for b in self.blocks]
        if len(outs) == 1:
            return outs[0]
        return ops.mean(ops.concat(outs, axis=0), axis=0, keepdims=True)

    def __call__(self, frames: Sequence[Tensor]) -> Tensor:
        """Fuse ``frames`` (oldest first); returns the last step's ``[1, D, H, W]`` output."""
        if len(frames) == 0:
            raise ValueError("fusion layer needs at least one frame")
        first = _as_state(frames[0])
        memory = Tensor(np.zeros(first.shape, dtype=first.dtype))
        self._state_bytes = memory.data.nbytes
        for frame in frames:
            memory = self.step(frame, memory)
        return memory
