"""Center-distance average precision and precision-recall curves.

A detection matches a ground-truth box of the same class when their BEV
centers lie within the distance threshold. Matching is greedy in descending
score, each detection taking the nearest still-unmatched box.
"""

from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .head import Detection

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
RECALL_STEPS = 100  # recall grid 0, 0.01, ..., 1

# Reported nuScenes figures for the full-size model; documentation only.
REFERENCE_AP4 = 46.7
REFERENCE_MAP = 36.9


@dataclass
class MatchResult:
    """Score-ordered TP/FP labels plus the ground-truth count they refer to."""

    scores: np.ndarray  # (K,) descending
    tp: np.ndarray  # (K,) bool
    num_gt: int
    gt_matched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @staticmethod
    def merge(results: Sequence["MatchResult"]) -> "MatchResult":
        """Pool several sequences; labels are re-sorted by score (stable)."""
        if not results:
            return MatchResult(np.zeros(0), np.zeros(0, dtype=bool), 0)
        scores = np.concatenate([r.scores for r in results])
        tp = np.concatenate([r.tp for r in results])
        order = np.argsort(-scores, kind="stable")
        return MatchResult(scores[order], tp[order], sum(r.num_gt for r in results),
                           np.concatenate([r.gt_matched for r in results]))


def _as_arrays(detections) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(detections) and isinstance(detections[0], Detection):
        xy = np.array([d.center for d in detections], dtype=float)
        cls = np.array([d.class_id for d in detections], dtype=int)
        sc = np.array([d.score for d in detections], dtype=float)
        return xy, cls, sc
    arr = np.asarray(detections, dtype=float).reshape(-1, 7)
    return arr[:, :2], arr[:, 5].astype(int), arr[:, 6]


def _gt_array(gt_boxes) -> np.ndarray:
    gt = np.asarray(gt_boxes, dtype=float)
    return gt.reshape(len(gt), -1) if gt.size else np.zeros((0, 6))


def match_center_distance(detections, gt_boxes: np.ndarray, threshold: float,
                          class_id: int | None = None) -> MatchResult:
    """Greedy class-matched center-distance assignment.

    ``detections`` is a list of :class:`Detection` or an ``(K, 7)`` array of
    ``(cx, cy, w, l, yaw, class, score)``; ``gt_boxes`` rows start with
    ``(cx, cy, w, l, yaw, class)``. When ``class_id`` is given only that class
    is considered. Detections are processed in descending score (stable for
    ties); each takes the nearest unmatched same-class box at distance
    ``<= threshold``, otherwise it is a false positive.
    """
    xy, cls, sc = _as_arrays(detections)
    gt = _gt_array(gt_boxes)
    gt_cls = gt[:, 5].astype(int)
    if class_id is not None:
        keep = cls == class_id
        xy, cls, sc = xy[keep], cls[keep], sc[keep]
        gt = gt[gt_cls == class_id]
        gt_cls = gt_cls[gt_cls == class_id]
    order = np.argsort(-sc, kind="stable")
    matched = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        cand = np.nonzero((gt_cls == cls[i]) & ~matched)[0]
        if len(cand) == 0:
            continue
        dist = np.hypot(gt[cand, 0] - xy[i, 0], gt[cand, 1] - xy[i, 1])
        j = int(np.argmin(dist))
        if dist[j] <= threshold:
            matched[cand[j]] = True
            tp[rank] = True
    return MatchResult(sc[order], tp, len(gt), matched)


def pr_curve(matches: MatchResult) -> list[tuple[float, float]]:
    """(recall, precision) after each score-distinct prefix of the detections."""
    if len(matches.tp) == 0:
        return []
    ctp = np.cumsum(matches.tp)
    cfp = np.cumsum(~matches.tp)
    # last index of every run of equal scores
    ends = np.nonzero(np.append(matches.scores[1:] != matches.scores[:-1], True))[0]
    points = []
    for e in ends:
        recall = ctp[e] / matches.num_gt if matches.num_gt else 0.0
        points.append((float(recall), float(ctp[e] / (ctp[e] + cfp[e]))))
    return points


def average_precision(matches: MatchResult, num_gt: int | None = None) -> float:
    """101-point interpolated AP.

    Interpolated precision at recall r is the max precision over curve points
    with recall >= r (0 if none). Both sides empty gives 1; ground truth
    without detections, or detections without ground truth, give 0. The sum
    is accumulated in exact rationals and rounded once.
    """
    num_gt = matches.num_gt if num_gt is None else num_gt
    if num_gt == 0:
        return 1.0 if len(matches.tp) == 0 else 0.0
    if len(matches.tp) == 0:
        return 0.0
    ctp = np.cumsum(matches.tp)
    n_seen = np.arange(1, len(matches.tp) + 1)
    ends = np.nonzero(np.append(matches.scores[1:] != matches.scores[:-1], True))[0]
    rec = [Fraction(int(ctp[e]), num_gt) for e in ends]
    env = [Fraction(int(ctp[e]), int(n_seen[e])) for e in ends]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    total, j = Fraction(0), 0
    for i in range(RECALL_STEPS + 1):
        r = Fraction(i, RECALL_STEPS)
        while j < len(rec) and rec[j] < r:
            j += 1
        if j == len(rec):
            break
        total += env[j]
    return float(total / (RECALL_STEPS + 1))


def pr_auc(points: Sequence[tuple[float, float]]) -> float:
    """Trapezoid area under a PR curve, extended flat to recall 0."""
    if not points:
        return 0.0
    rec = np.array([0.0] + [p[0] for p in points])
    prec = np.array([points[0][1]] + [p[1] for p in points])
    return float(np.sum(np.diff(rec) * (prec[1:] + prec[:-1]) / 2.0))


@dataclass
class ApSummary:
    ap: dict[float, float]  # class-averaged AP per threshold
    per_class: dict[int, dict[float, float]]
    auc: dict[int, dict[float, float]]

    @property
    def mean_ap(self) -> float:
        return float(np.mean([self.ap[t] for t in THRESHOLDS]))


def map_summary(per_threshold: dict[float, float], per_class=None, auc=None) -> ApSummary:
    """Bundle the four threshold APs; mAP is their arithmetic mean."""
    missing = [t for t in THRESHOLDS if t not in per_threshold]
    extra = [t for t in per_threshold if t not in THRESHOLDS]
    if missing or extra:
        raise ValueError(f"map_summary needs exactly thresholds {THRESHOLDS}; missing {missing}, extra {extra}")
    return ApSummary({t: float(per_threshold[t]) for t in THRESHOLDS}, per_class or {}, auc or {})


@dataclass
class Evaluation:
    summary: ApSummary
    curves: dict[tuple[int, float], list[tuple[float, float]]]
    classes: list[int]


def evaluate(detections: Sequence[Sequence[Detection]], gt_boxes: Sequence[np.ndarray],
             num_classes: int = 4) -> Evaluation:
    """Evaluate per-sequence detections against per-sequence ground truth.

    Classes with neither ground truth nor detections anywhere are left out of
    the class average.
    """
    if len(detections) != len(gt_boxes):
        raise ValueError("detections and ground truth cover different numbers of sequences")
    classes = []
    for c in range(num_classes):
        has_gt = any(np.any(_gt_array(g)[:, 5] == c) for g in gt_boxes)
        has_det = any(d.class_id == c for dets in detections for d in dets)
        if has_gt or has_det:
            classes.append(c)
    per_class: dict[int, dict[float, float]] = {c: {} for c in classes}
    auc: dict[int, dict[float, float]] = {c: {} for c in classes}
    curves = {}
    for c in classes:
        for t in THRESHOLDS:
            merged = MatchResult.merge([match_center_distance(d, g, t, class_id=c)
                                        for d, g in zip(detections, gt_boxes)])
            per_class[c][t] = average_precision(merged)
            curves[(c, t)] = pr_curve(merged)
            auc[c][t] = pr_auc(curves[(c, t)])
    ap = {t: (float(np.mean([per_class[c][t] for c in classes])) if classes else 0.0) for t in THRESHOLDS}
    return Evaluation(map_summary(ap, per_class, auc), curves, classes)


METRIC_HEADER = ("class", "threshold", "AP", "mAP", "AUC")


def metrics_table(ev: Evaluation | None, class_names: Sequence[str]) -> str:
    """Comma-separated table; an ``all`` row per threshold carries the class mean."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_HEADER)
    if ev is None:
        return buf.getvalue()
    s = ev.summary
    for c in ev.classes:
        class_map = float(np.mean([s.per_class[c][t] for t in THRESHOLDS]))
        for t in THRESHOLDS:
            writer.writerow((class_names[c], t, f"{s.per_class[c][t]:.6f}", f"{class_map:.6f}",
                             f"{s.auc[c][t]:.6f}"))
    for t in THRESHOLDS:
        mean_auc = float(np.mean([s.auc[c][t] for c in ev.classes])) if ev.classes else 0.0
        writer.writerow(("all", t, f"{s.ap[t]:.6f}", f"{s.mean_ap:.6f}", f"{mean_auc:.6f}"))
    return buf.getvalue()


def write_pr_curves(ev: Evaluation, out_dir: str | Path, class_names: Sequence[str]) -> list[Path]:
    """One ``pr_<class>_<threshold>.csv`` file of (recall, precision) rows per curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (c, t), pts in sorted(ev.curves.items()):
        path = out_dir / f"pr_{class_names[c]}_{t:g}m.csv"
        lines = ["recall,precision"] + [f"{r:.6f},{p:.6f}" for r, p in pts]
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths
