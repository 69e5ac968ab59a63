"""Full detector: pillar encoder, stem, dynamic downsampling, temporal fusion, FPN and head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbone import FPN, DynamicDownsample, Stem
from .bev import PillarEncoder, PreparedFrame, SequenceBatch, prepare_sequence
from .config import ModelConfig
from .fusion import FusionLayer
from .head import DetectionHead, Detection, HeadOutput, decode_topk
from .nn import Module
from .sim import PointCloudFrame
from .tensor import Tensor, no_grad


class Detector(Module):
    """Temporal detector; ``mode="baseline"`` sees the last frame only and skips fusion.

    The forward pass takes prepared point features only; no ego pose,
    odometry or timestamps enter the network.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 0xDE7EC7])
        self.config = config
        d = config.dim
        self.encoder = PillarEncoder(rng, config.c_in, dtype=dtype)
        self.stem = Stem(rng, config.c_in, d, dtype=dtype)
        self.down = DynamicDownsample(rng, d, factor=config.downsample, dtype=dtype)
        # built in both modes so parameter draws for the shared parts stay aligned
        fusion = FusionLayer(rng, d, config.n_queries, config.n_blocks, config.kernel,
                             config.fusion_mode, config.strides, dtype=dtype)
        self.fusion = fusion if config.mode == "attentivegru" else None
        self.fpn = FPN(rng, d, dtype=dtype)
        self.head = DetectionHead(rng, d, dtype=dtype)
        self.dtype = dtype

    @property
    def grid(self):
        return self.config.grid

    @property
    def head_grid(self):
        return self.config.head_grid

    def frame_features(self, prepared: PreparedFrame) -> Tensor:
        """Per-frame map ``[1, D, H/f, W/f]`` before fusion."""
        x = self.encoder(prepared, self.grid)
        return self.down(self.stem(x))

    def __call__(self, frames: Sequence[PreparedFrame] | Sequence[PointCloudFrame] | SequenceBatch) -> HeadOutput:
        if isinstance(frames, SequenceBatch):
            frames = frames.frames
        elif frames and isinstance(frames[0], PointCloudFrame):
            frames = prepare_sequence(frames, self.grid).frames
        frames = list(frames)[-self.config.frames:]
        if not frames:
            raise ValueError("detector needs at least one frame")
        if self.fusion is None:
            fused = self.frame_features(frames[-1])
        else:
            fused = self.fusion([self.frame_features(f) for f in frames])
        return self.head(self.fpn(fused).levels[0])

    def predict(self, frames, k: int = 100, score_threshold: float = 0.05) -> list[Detection]:
        with no_grad():
            out = self(frames)
        return decode_topk(out, self.head_grid, k, score_threshold)

    def latent_queries(self) -> list[Tensor]:
        return [] if self.fusion is None else [b.queries for b in self.fusion.blocks]
