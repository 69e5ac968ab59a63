"""Center-point detection head: heatmaps, centerness, box regression and losses.

The head runs on the polar grid of the finest pyramid level. Box parameters
per cell are ``(dx, dy, log w, log l, sin yaw, cos yaw)`` where ``(dx, dy)``
is the metric offset of the object center from the cell center in the
Cartesian ego frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .bev import GridSpec
from .nn import Conv2d, Module
from .tensor import Tensor, note_branch, record

NUM_CLASSES = 4
BOX_PARAMS = 6
HEAT_PRIOR = 0.1


@dataclass
class HeadOutput:
    heatmap: Tensor  # [num_classes, H, W], sigmoid
    centerness: Tensor  # [1, H, W], sigmoid
    box_params: Tensor  # [6, H, W], raw


@dataclass
class Detection:
    center: tuple[float, float]
    size: tuple[float, float]
    yaw: float
    class_id: int
    score: float

    def as_row(self) -> list[float]:
        return [self.center[0], self.center[1], self.size[0], self.size[1], self.yaw,
                float(self.class_id), self.score]


@dataclass
class TargetMaps:
    heatmap: np.ndarray  # (C, H, W)
    centerness: np.ndarray  # (H, W)
    box: np.ndarray  # (6, H, W)
    mask: np.ndarray  # (H, W) bool, cells carrying box/centerness targets
    skipped: int = 0

    @property
    def num_positive(self) -> int:
        return int(self.mask.sum())


class DetectionHead(Module):
    """Two shared 3x3 conv + ReLU layers followed by three 1x1 branches."""

    def __init__(self, rng: np.random.Generator, dim: int, num_classes: int = NUM_CLASSES,
                 prior: float = HEAT_PRIOR, dtype=np.float64):
        self.shared1 = Conv2d(rng, dim, dim, 3, dtype=dtype)
        self.shared2 = Conv2d(rng, dim, dim, 3, dtype=dtype)
        self.heat = Conv2d(rng, dim, num_classes, 1, gain=0.1, dtype=dtype)
        self.heat.bias.data[...] = -math.log((1.0 - prior) / prior)
        self.center = Conv2d(rng, dim, 1, 1, gain=0.1, dtype=dtype)
        self.box = Conv2d(rng, dim, BOX_PARAMS, 1, gain=0.1, dtype=dtype)
        self.num_classes = num_classes

    def __call__(self, features: Tensor) -> HeadOutput:
        return head_forward(features, self)


def head_forward(features: Tensor, head: DetectionHead) -> HeadOutput:
    x = ops.reshape(features, (1,) + features.shape) if features.ndim == 3 else features
    x = ops.relu(head.shared2(ops.relu(head.shared1(x))))

    def squeeze(t: Tensor) -> Tensor:
        return ops.reshape(t, t.shape[1:])

    return HeadOutput(
        heatmap=squeeze(ops.sigmoid(head.heat(x))),
        centerness=squeeze(ops.sigmoid(head.center(x))),
        box_params=squeeze(head.box(x)),
    )


# -- targets -----------------------------------------------------------------


def _fractional_cell(spec: GridSpec, r: float, az: float) -> tuple[float, float]:
    """Position in cell units where cell centers sit on integers."""
    return r / spec.range_step - 0.5, (az + spec.fov / 2) / spec.azimuth_step - 0.5


def gaussian_sigma(w: float, length: float, spec: GridSpec) -> float:
    return max(1.0, min(w, length) / (6.0 * spec.range_step))


def assign_targets(gt_boxes: np.ndarray, spec: GridSpec, num_classes: int = NUM_CLASSES,
                   radius: int = 1) -> TargetMaps:
    """Render Gaussian class heatmaps and box/centerness targets on ``spec``.

    ``gt_boxes`` rows are ``(cx, cy, w, l, yaw, class, ...)`` in the ego frame.
    Each object's Gaussian peaks at exactly 1 on the cell containing its
    center; overlapping Gaussians of a class combine by max. Box and
    centerness targets go to cells within Chebyshev ``radius`` of the center
    cell, the nearest object winning contested cells. Boxes whose center falls
    outside the grid are skipped and counted.
    """
    h, w = spec.shape
    heat = np.zeros((num_classes, h, w))
    center = np.zeros((h, w))
    box = np.zeros((BOX_PARAMS, h, w))
    mask = np.zeros((h, w), dtype=bool)
    best = np.full((h, w), np.inf)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    skipped = 0
    boxes = np.asarray(gt_boxes, dtype=float)
    for cx, cy, bw, bl, yaw, cls in (boxes[:, :6] if boxes.size else ()):
        r, az = math.hypot(cx, cy), math.atan2(cy, cx)
        row, col, inside = spec.cell_of(np.array(r), np.array(az))
        if not inside:
            skipped += 1
            continue
        row, col = int(row), int(col)
        sigma = gaussian_sigma(bw, bl, spec)
        g = np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2.0 * sigma * sigma))
        k = int(cls)
        heat[k] = np.maximum(heat[k], g)

        fr, fc = _fractional_cell(spec, r, az)
        r0, r1 = max(0, row - radius), min(h, row + radius + 1)
        c0, c1 = max(0, col - radius), min(w, col + radius + 1)
        for i in range(r0, r1):
            for j in range(c0, c1):
                d = math.hypot(i - fr, j - fc)
                if d >= best[i, j]:
                    continue
                best[i, j] = d
                mask[i, j] = True
                center[i, j] = math.exp(-d)
                px, py = spec.cell_center_xy(i, j)
                box[:, i, j] = (cx - px, cy - py, math.log(bw), math.log(bl), math.sin(yaw), math.cos(yaw))
    return TargetMaps(heat, center, box, mask, skipped)


# -- decoding ----------------------------------------------------------------


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def peak_mask(heatmap: np.ndarray) -> np.ndarray:
    """Cells equal to the max of their 3x3 neighborhood (plateaus count as peaks)."""
    c, h, w = heatmap.shape
    padded = np.pad(heatmap, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return heatmap == windows.max(axis=(-2, -1))


def decode_topk(output: HeadOutput, spec: GridSpec, k: int = 100,
                score_threshold: float = 0.05) -> list[Detection]:
    """Top-``k`` peak detections scored by heatmap x centerness.

    Candidates scoring at or below ``score_threshold`` are dropped. Ties in
    score are broken by row-major cell order, then class index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    heat = _data(output.heatmap)
    ctr = _data(output.centerness).reshape(heat.shape[1:])
    params = _data(output.box_params)
    scores = heat * ctr[None]
    cls, row, col = np.nonzero(peak_mask(heat) & (scores > score_threshold))
    s = scores[cls, row, col]
    cell = row * heat.shape[2] + col
    order = np.lexsort((cls, cell, -s))[:k]
    dets = []
    for i in order:
        r, c = int(row[i]), int(col[i])
        dx, dy, lw, ll, sn, cs = params[:, r, c]
        px, py = spec.cell_center_xy(r, c)
        dets.append(Detection(
            center=(float(px + dx), float(py + dy)),
            size=(float(math.exp(lw)), float(math.exp(ll))),
            yaw=float(math.atan2(sn, cs)),
            class_id=int(cls[i]),
            score=float(s[i]),
        ))
    return dets


def write_detections(path: str | Path, sequences: Sequence[Iterable[Detection]]) -> None:
    """One line per detection: ``seq cx cy w l yaw class score``."""
    lines = []
    for seq, dets in enumerate(sequences):
        for d in dets:
            cx, cy, w, l, yaw, cls, score = d.as_row()
            lines.append(f"{seq} {cx!r} {cy!r} {w!r} {l!r} {yaw!r} {int(cls)} {score!r}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path: str | Path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        seq, cls = int(parts[0]), int(parts[6])
        cx, cy, w, l, yaw, score = (float(parts[i]) for i in (1, 2, 3, 4, 5, 7))
        out.setdefault(seq, []).append(Detection((cx, cy), (w, l), yaw, cls, score))
    return out


# -- losses ------------------------------------------------------------------


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               eps: float = 1e-6, normalize: str = "cells") -> Tensor:
    """Sigmoid focal loss with penalty-reduced negatives around each peak.

    Cells with target exactly 1 are positives: ``-alpha (1-p)^gamma log p``.
    All other cells: ``-(1-alpha) (1-y)^4 p^gamma log(1-p)``. Predictions are
    clamped to ``[eps, 1-eps]``. ``normalize`` divides the summed loss by the
    number of cells (``"cells"``) or by the positive count (``"positives"``).
    """
    y = np.asarray(target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ValueError(f"focal_loss shape mismatch: {pred.shape} vs {y.shape}")
    if np.any(y < 0) or np.any(y > 1) or not np.all(np.isfinite(y)):
        raise ValueError("focal_loss targets must lie in [0, 1]")
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)
    note_branch(inside)
    p = np.clip(pred.data, eps, 1 - eps)
    pos = y == 1.0
    neg_w = (1.0 - alpha) * (1.0 - y) ** 4
    log_p, log_q = np.log(p), np.log1p(-p)
    elem = np.where(pos, -alpha * (1 - p) ** gamma * log_p, -neg_w * p ** gamma * log_q)
    if normalize == "cells":
        denom = float(y.size)
    elif normalize == "positives":
        denom = float(max(1, int(pos.sum())))
    else:
        raise ValueError(f"unknown normalization {normalize!r}")

    def backward(g):
        d_pos = alpha * (gamma * (1 - p) ** (gamma - 1) * log_p - (1 - p) ** gamma / p)
        d_neg = -neg_w * (gamma * p ** (gamma - 1) * log_q - p ** gamma / (1 - p))
        return (g * np.where(pos, d_pos, d_neg) * inside / denom,)

    return record(np.asarray(elem.sum() / denom, dtype=pred.dtype), (pred,), backward)


def _zero_loss(pred: Tensor) -> Tensor:
    return record(np.zeros((), dtype=pred.dtype), (pred,), lambda g: (np.zeros_like(pred.data),))


def smooth_l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, beta: float = 1.0) -> Tensor:
    """Smooth L1 over the box parameters of masked cells, mean over elements.

    ``pred``/``target`` are ``[P, H, W]``; ``mask`` is ``(H, W)``. Returns 0
    when no cell is masked.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum()) * pred.shape[0]
    if n == 0:
        return _zero_loss(pred)
    d = (pred.data - target) * mask
    small = np.abs(d) < beta
    note_branch(small)
    elem = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta) * mask

    def backward(g):
        return (g * np.where(small, d / beta, np.sign(d)) * mask / n,)

    return record(np.asarray(elem.sum() / n, dtype=pred.dtype), (pred,), backward)


def centerness_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Binary cross-entropy on masked cells, mean over them (0 when none)."""
    p_full = pred.data.reshape(mask.shape)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return _zero_loss(pred)
    inside = (p_full >= eps) & (p_full <= 1 - eps)
    note_branch(inside)
    p = np.clip(p_full, eps, 1 - eps)
    t = np.asarray(target).reshape(mask.shape)
    elem = -(t * np.log(p) + (1 - t) * np.log1p(-p)) * mask

    def backward(g):
        return ((g * (p - t) / (p * (1 - p)) * mask * inside / n).reshape(pred.shape),)

    return record(np.asarray(elem.sum() / n, dtype=pred.dtype), (pred,), backward)


@dataclass
class LossParts:
    total: Tensor
    focal: float
    centerness: float
    box: float


def detection_loss(output: HeadOutput, targets: TargetMaps, box_weight: float = 1.0,
                   alpha: float = 0.25, gamma: float = 2.0, normalize: str = "cells") -> LossParts:
    """``focal + centerness BCE + box_weight * smooth L1``."""
    lf = focal_loss(output.heatmap, targets.heatmap, alpha, gamma, normalize=normalize)
    lc = centerness_loss(output.centerness, targets.centerness, targets.mask)
    lb = smooth_l1_loss(output.box_params, targets.box, targets.mask)
    total = ops.add(ops.add(lf, lc), ops.mul(lb, box_weight))
    return LossParts(total, float(lf.item()), float(lc.item()), float(lb.item()))
