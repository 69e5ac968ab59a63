"""Feature extraction around the fusion layer: stem plus dynamic downsampling before it, a 3-level FPN after it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .conv import ShapeError, max_pool2d, pad2d, upsample_nearest2d
from .nn import Conv2d, Module, he_normal
from .tensor import Tensor, parameter

BRANCH_KERNELS = (1, 2, 4)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


class Stem(Module):
    """Two 3x3 conv + ReLU layers, C_in -> D -> D, stride 1."""

    def __init__(self, rng: np.random.Generator, c_in: int, dim: int, dtype=np.float64):
        self.conv1 = Conv2d(rng, c_in, dim, 3, dtype=dtype)
        self.conv2 = Conv2d(rng, dim, dim, 3, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        return _unbatched(ops.relu(self.conv2(ops.relu(self.conv1(x)))), squeeze)


def branch_padding(kernel: int, factor: int) -> tuple[int, int, int, int]:
    """Pad/crop so a stride-``factor`` conv of size ``kernel`` maps H to H/factor.

    Total padding is ``kernel - factor``; the odd unit goes top/left, and a
    negative total crops from the bottom/right.
    """
    total = kernel - factor
    first = -(-total // 2) if total > 0 else 0
    second = total - first
    return first, second, first, second


class DynamicDownsample(Module):
    """Softmax-weighted mix of parallel strided convolutions with kernels 1, 2 and 4."""

    def __init__(self, rng: np.random.Generator, dim: int, factor: int = 2,
                 kernels: tuple[int, ...] = BRANCH_KERNELS, dtype=np.float64):
        self.factor = factor
        self.kernels = tuple(kernels)
        self.branches = [Conv2d(rng, dim, dim, k, stride=factor, padding=0, dtype=dtype) for k in kernels]
        self.attn_weight = parameter(he_normal(rng, (dim, len(kernels)), dim, 1.0), dtype=dtype)
        self.attn_bias = parameter(np.zeros(len(kernels)), dtype=dtype)

    def branch_weights(self, x: Tensor) -> Tensor:
        pooled = ops.mean(x, axis=(2, 3))  # [N, D]
        return ops.softmax(ops.add(ops.matmul(pooled, self.attn_weight), self.attn_bias), axis=1)

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        return [conv(pad2d(x, branch_padding(k, self.factor)))
                for k, conv in zip(self.kernels, self.branches)]

    def __call__(self, x: Tensor, weights: Tensor | np.ndarray | None = None) -> Tensor:
        x, squeeze = _batched(x)
        h, w = x.shape[2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"dynamic_downsample: {h}x{w} not divisible by factor {self.factor}")
        if weights is None:
            weights = self.branch_weights(x)
        elif not isinstance(weights, Tensor):
            weights = Tensor(np.asarray(weights, dtype=x.dtype).reshape(1, -1))
        out = None
        for i, y in enumerate(self.branch_outputs(x)):
            wi = ops.reshape(ops.getitem(weights, (slice(None), slice(i, i + 1))), (-1, 1, 1, 1))
            term = ops.mul(y, wi)
            out = term if out is None else ops.add(out, term)
        return _unbatched(out, squeeze)


@dataclass
class PyramidFeatures:
    levels: list[Tensor]  # strides 1, 2, 4


class FPN(Module):
    """Bottom-up 3x3 convs with 2x max-pooling, top-down nearest 2x upsampling plus 1x1 laterals."""

    def __init__(self, rng: np.random.Generator, dim: int, n_levels: int = 3, dtype=np.float64):
        self.down = [Conv2d(rng, dim, dim, 3, dtype=dtype) for _ in range(n_levels)]
        self.lateral = [Conv2d(rng, dim, dim, 1, gain=1.0, dtype=dtype) for _ in range(n_levels)]

    def __call__(self, x: Tensor) -> PyramidFeatures:
        x, squeeze = _batched(x)
        n = len(self.down)
        scale = 2 ** (n - 1)
        if x.shape[2] % scale or x.shape[3] % scale:
            raise ShapeError(f"fpn: {x.shape[2]}x{x.shape[3]} not divisible by {scale}")
        bottom = []
        y = x
        for i, conv in enumerate(self.down):
            if i:
                y = max_pool2d(y, 2)
            y = ops.relu(conv(y))
            bottom.append(y)
        top = self.lateral[-1](bottom[-1])
        levels = [top]
        for i in range(n - 2, -1, -1):
            top = ops.add(self.lateral[i](bottom[i]), upsample_nearest2d(top, 2))
            levels.append(top)
        levels.reverse()
        return PyramidFeatures([_unbatched(t, squeeze) for t in levels])


__all__ = ["Stem", "DynamicDownsample", "FPN", "PyramidFeatures", "branch_padding"]
