"""Polar BEV projection of radar point clouds through a pillar-style encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import ops
from .nn import Module, he_normal
from .sim import PointCloudFrame
from .tensor import Tensor, parameter

N_POINT_FEATURES = 6
DOPPLER_SCALE = 10.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform range x azimuth grid; rows index range, columns azimuth."""

    range_bins: int = 32
    azimuth_bins: int = 32
    max_range: float = 64.0
    fov: float = math.pi / 2
    c_in: int = 16

    def __post_init__(self):
        if self.range_bins <= 0 or self.azimuth_bins <= 0:
            raise ValueError("grid needs positive range_bins and azimuth_bins")

    @property
    def range_step(self) -> float:
        return self.max_range / self.range_bins

    @property
    def azimuth_step(self) -> float:
        return self.fov / self.azimuth_bins

    @property
    def shape(self) -> tuple[int, int]:
        return self.range_bins, self.azimuth_bins

    def downsampled(self, factor: int) -> "GridSpec":
        if self.range_bins % factor or self.azimuth_bins % factor:
            raise ValueError(f"grid {self.shape} not divisible by {factor}")
        return replace(self, range_bins=self.range_bins // factor,
                       azimuth_bins=self.azimuth_bins // factor)

    def cell_of(self, rng: np.ndarray, az: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cell indices ``(row, col)`` plus an inside-grid mask for polar coordinates."""
        rng = np.asarray(rng, dtype=float)
        az = np.asarray(az, dtype=float)
        inside = (rng >= 0) & (rng <= self.max_range) & (np.abs(az) <= self.fov / 2)
        row = np.minimum(np.floor(rng / self.range_step), self.range_bins - 1).astype(np.int64)
        col = np.minimum(np.floor((az + self.fov / 2) / self.azimuth_step),
                         self.azimuth_bins - 1).astype(np.int64)
        return row, col, inside

    def cell_center_polar(self, row, col) -> tuple[np.ndarray, np.ndarray]:
        r = (np.asarray(row) + 0.5) * self.range_step
        az = -self.fov / 2 + (np.asarray(col) + 0.5) * self.azimuth_step
        return r, az

    def cell_center_xy(self, row, col) -> np.ndarray:
        r, az = self.cell_center_polar(row, col)
        return np.stack([r * np.cos(az), r * np.sin(az)], axis=-1)


@dataclass
class BevFeatureMap:
    values: Tensor  # [C, H, W]
    grid: GridSpec


@dataclass
class PreparedFrame:
    """Point features and flat cell indices for the in-grid points of one frame."""

    features: np.ndarray  # (P, 6)
    cells: np.ndarray  # (P,)
    timestamp: float


def point_features(frame: PointCloudFrame, spec: GridSpec) -> PreparedFrame:
    """Normalized per-point features plus sub-cell offsets from the cell center."""
    pts = frame.points
    if len(pts) == 0:
        return PreparedFrame(np.zeros((0, N_POINT_FEATURES)), np.zeros(0, dtype=np.int64), frame.timestamp)
    r, az, dop, amp = pts.T
    row, col, inside = spec.cell_of(r, az)
    cr, caz = spec.cell_center_polar(row, col)
    feats = np.stack([
        r / spec.max_range,
        az / (spec.fov / 2),
        dop / DOPPLER_SCALE,
        np.log(np.maximum(amp, 1e-12)),
        (r - cr) / spec.range_step,
        (az - caz) / spec.azimuth_step,
    ], axis=1)
    cells = row * spec.azimuth_bins + col
    return PreparedFrame(feats[inside], cells[inside], frame.timestamp)


class PillarEncoder(Module):
    """Shared pointwise linear layer + softplus, max-pooled per cell."""

    def __init__(self, rng: np.random.Generator, c_in: int = 16, dtype=np.float64):
        self.weight = parameter(he_normal(rng, (N_POINT_FEATURES, c_in), N_POINT_FEATURES, 1.0), dtype=dtype)
        self.bias = parameter(np.zeros(c_in), dtype=dtype)

    def encode_points(self, features: np.ndarray) -> Tensor:
        x = Tensor(features.astype(self.weight.dtype))
        return ops.softplus(ops.add(ops.matmul(x, self.weight), self.bias))

    def __call__(self, prepared: PreparedFrame, spec: GridSpec) -> Tensor:
        """Project one prepared frame to a ``[C, H, W]`` map."""
        h, w = spec.shape
        c = self.weight.shape[1]
        if len(prepared.cells) == 0:
            return Tensor(np.zeros((c, h, w), dtype=self.weight.dtype))
        enc = self.encode_points(prepared.features)
        pooled, _ = ops.scatter_max(enc, prepared.cells, h * w)
        return ops.transpose(ops.reshape(pooled, (h, w, c)), (2, 0, 1))


def pillar_project(frame: PointCloudFrame, spec: GridSpec, encoder: PillarEncoder) -> BevFeatureMap:
    return BevFeatureMap(encoder(point_features(frame, spec), spec), spec)


@dataclass
class SequenceBatch:
    """Prepared frames in time order plus the final frame's ground truth."""

    frames: list[PreparedFrame]
    gt_boxes: np.ndarray


def prepare_sequence(frames: Sequence[PointCloudFrame], spec: GridSpec) -> SequenceBatch:
    if not frames:
        raise ValueError("empty sequence")
    ts = [f.timestamp for f in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"frame timestamps are not strictly increasing: {ts}")
    return SequenceBatch([point_features(f, spec) for f in frames], frames[-1].gt_boxes.copy())


def batch_sequence(frames: Sequence[PointCloudFrame], spec: GridSpec,
                   encoder: PillarEncoder) -> tuple[list[BevFeatureMap], np.ndarray]:
    """Project every frame in time order; targets come from the last frame only."""
    batch = prepare_sequence(frames, spec)
    return [BevFeatureMap(encoder(p, spec), spec) for p in batch.frames], batch.gt_boxes
