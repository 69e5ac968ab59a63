"""Evaluation, complexity benchmark, gradient checks and the fusion ablation."""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .conv import conv2d, deform_conv2d
from .config import RunConfig
from .fusion import FusionBlock, FusionLayer, fusion_block_forward, state_integration
from .gradcheck import GradCheckReport, grad_check
from .head import Detection, assign_targets, centerness_loss, detection_loss, focal_loss, smooth_l1_loss
from .bev import GridSpec
from .metrics import Evaluation, evaluate
from .model import Detector
from .sim import PointCloudFrame, SimConfig, generate_scene, render_sequence
from .tensor import Tensor, backward_pass, mac_counter, no_grad


# -- evaluation --------------------------------------------------------------


def run_detector(model: Detector, sequences: Sequence[Sequence[PointCloudFrame]], k: int,
                 score_threshold: float) -> list[list[Detection]]:
    return [model.predict(frames, k, score_threshold) for frames in sequences]


def evaluate_model(model: Detector, sequences: Sequence[Sequence[PointCloudFrame]], cfg: RunConfig
                   ) -> tuple[list[list[Detection]], Evaluation]:
    dets = run_detector(model, sequences, cfg.eval.k, cfg.eval.score_threshold)
    return dets, evaluate(dets, [frames[-1].gt_boxes for frames in sequences])


# -- complexity --------------------------------------------------------------


@dataclass
class BenchRow:
    frames: int
    wall_ms: float
    mac_count: int
    state_bytes: int


def bench_fusion(cfg: RunConfig, lengths: Sequence[int], repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Time and count multiply-accumulates of the fusion layer for each sequence length.

    Only the fusion layer is instrumented: the per-frame backbone is a
    constant per-frame cost outside the recurrence.
    """
    if len(lengths) < 2:
        raise ValueError("bench needs at least two sequence lengths")
    m = cfg.model
    rng = np.random.default_rng([seed, 0xBE7C])
    layer = FusionLayer(rng, m.dim, m.n_queries, m.n_blocks, m.kernel, m.fusion_mode, m.strides)
    h, w = m.head_grid.shape
    rows = []
    for t in lengths:
        frames = [Tensor(rng.normal(size=(m.dim, h, w))) for _ in range(t)]
        times = []
        with no_grad():
            with mac_counter() as macs:
                layer(frames)
            for _ in range(repeats):
                start = time.perf_counter()
                layer(frames)
                times.append((time.perf_counter() - start) * 1e3)
        rows.append(BenchRow(t, statistics.median(times), int(macs.total), layer.state_bytes))
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    lines = ["T,wall_ms,mac_count,state_bytes"]
    lines += [f"{r.frames},{r.wall_ms:.3f},{r.mac_count},{r.state_bytes}" for r in rows]
    return "\n".join(lines) + "\n"


def affine_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    total = np.sum((y - y.mean()) ** 2)
    return 1.0 - float(np.sum(resid ** 2) / total) if total > 0 else 1.0


# -- gradient checks ---------------------------------------------------------


@dataclass
class ComponentCheck:
    name: str
    report: GradCheckReport

    @property
    def error(self) -> float:
        return self.report.max_rel_error


@dataclass
class GradcheckSummary:
    components: list[ComponentCheck]
    query_grad_norms: np.ndarray  # (N, M)
    tolerance: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for c in self.components:
            status = "ok" if c.error < self.tolerance else "FAIL"
            out.append(f"{c.name:34s} max_rel_err={c.error:.3e} checked={c.report.checked} "
                       f"skipped={c.report.skipped} {status}")
        for b, row in enumerate(self.query_grad_norms):
            out.append(f"block {b} query grad norms: " + " ".join(f"{v:.3e}" for v in row))
        return out


def _weighted(fn: Callable[[Tensor], Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    w = Tensor(weights)
    return lambda x: ops.sum(ops.mul(fn(x), w))


def _merge(reports: Sequence[GradCheckReport]) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(worst.max_rel_error, sum(r.checked for r in reports),
                           sum(r.skipped for r in reports), worst.worst_index)


def _check_inputs(fn: Callable[..., Tensor], inputs: Sequence[Tensor], out_shape, rng, eps) -> GradCheckReport:
    """Grad-check a weighted sum of ``fn(*inputs)`` w.r.t. each input in turn."""
    weights = rng.normal(size=out_shape)
    reports = []
    for i, point in enumerate(inputs):
        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return fn(*args)
        reports.append(grad_check(_weighted(f, weights), point, eps))
    return _merge(reports)


def _check_params(loss: Callable[[], Tensor], params: Sequence[Tensor], eps) -> GradCheckReport:
    return _merge([grad_check(lambda _p: loss(), p, eps) for p in params])


def tiny_block(rng: np.random.Generator, dim: int = 3, n_queries: int = 3, mode: str = "default") -> FusionBlock:
    block = FusionBlock(rng, dim, n_queries, 3, 1, mode)
    # non-zero offsets so the bilinear sampling is exercised off the integer lattice
    block.offset_pred.weight.data = rng.normal(0.0, 0.3, block.offset_pred.weight.shape)
    block.threshold_offset.data = np.asarray(0.02)
    block.straight_through = False
    return block


def query_grad_norms(cfg: RunConfig, seed: int = 0) -> np.ndarray:
    """Latent-query gradient norms after one detection-loss backward pass.

    Uses a small double-precision detector on a simulated two-frame sequence
    containing at least one object.
    """
    model_cfg = dataclasses.replace(cfg.model, range_bins=16, azimuth_bins=16, c_in=4, dim=4,
                                    n_queries=min(cfg.model.n_queries, 4), frames=2, mode="attentivegru")
    sim = dataclasses.replace(SimConfig(), n_frames=2, n_objects=(2, 4))
    model = Detector(model_cfg, seed, np.float64)
    frames = render_sequence(generate_scene(sim, seed), seed)
    targets = assign_targets(frames[-1].gt_boxes, model.head_grid)
    parts = detection_loss(model(frames), targets)
    backward_pass(parts.total)
    return np.array([[np.linalg.norm(q.grad[i]) if q.grad is not None else 0.0
                      for i in range(q.shape[0])] for q in model.latent_queries()])


def run_gradchecks(cfg: RunConfig, tolerance: float = 1e-4, epsilon: float = 1e-5,
                   seed: int = 0) -> GradcheckSummary:
    """Central-difference checks of every differentiable component, in double precision."""
    rng = np.random.default_rng([seed, 0x6C4E])
    checks = []

    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    checks.append(ComponentCheck("conv2d", _check_inputs(
        lambda x, k, b: conv2d(x, k, b, stride=1, padding=1), [x, k, b], (1, 3, 6, 6), rng, epsilon)))

    off = Tensor(rng.normal(0.0, 0.7, size=(1, 18, 6, 6)))
    checks.append(ComponentCheck("deform_conv2d", _check_inputs(
        lambda x, k, o: deform_conv2d(x, k, o), [x, k, off], (1, 3, 6, 6), rng, epsilon)))

    block = tiny_block(rng)
    h_prev = Tensor(rng.normal(size=(3, 3, 5, 5)))
    xq = Tensor(rng.normal(size=(3, 3, 5, 5)))
    checks.append(ComponentCheck("state_integration", _check_inputs(
        lambda h, x: state_integration(h, x, block), [h_prev, xq], (3, 3, 5, 5), rng, epsilon)))
    w_si = Tensor(rng.normal(size=(3, 3, 5, 5)))
    si_params = [block.gate_reset.weight, block.gate_update.weight, block.candidate.weight,
                 block.deform_weight, block.offset_pred.weight]
    checks.append(ComponentCheck("state_integration params", _check_params(
        lambda: ops.sum(ops.mul(state_integration(h_prev, xq, block), w_si)), si_params, epsilon)))

    present = Tensor(rng.normal(size=(1, 3, 5, 5)))
    memory = Tensor(rng.normal(size=(1, 3, 5, 5)))
    for mode in ("default", "sparse_fast"):
        checks.append(ComponentCheck(f"fusion_block_forward[{mode}]", _check_inputs(
            lambda p, m, mode=mode: fusion_block_forward(p, m, block, mode), [present, memory],
            (1, 3, 5, 5), rng, epsilon)))

    layer = FusionLayer(rng, 3, 3, 2, 3)
    for blk in layer.blocks:
        blk.offset_pred.weight.data = rng.normal(0.0, 0.3, blk.offset_pred.weight.shape)
    layer.set_straight_through(False)
    f0 = Tensor(rng.normal(size=(3, 5, 5)))
    f1 = Tensor(rng.normal(size=(3, 5, 5)))
    checks.append(ComponentCheck("fusion_layer_forward(T=2)", _check_inputs(
        lambda a, c: layer([a, c]), [f0, f1], (1, 3, 5, 5), rng, epsilon)))

    spec = GridSpec(8, 8, 32.0)
    boxes = np.array([[10.0, 2.0, 1.8, 4.5, 0.3, 0, 0, 0], [20.0, -6.0, 0.6, 0.6, 1.1, 3, 0, 0]])
    tg = assign_targets(boxes, spec)
    heat = Tensor(rng.uniform(0.02, 0.98, size=tg.heatmap.shape))
    checks.append(ComponentCheck("focal_loss", grad_check(lambda p: focal_loss(p, tg.heatmap), heat, epsilon)))
    box = Tensor(rng.normal(0.0, 1.5, size=tg.box.shape))
    checks.append(ComponentCheck("smooth_l1_loss", grad_check(
        lambda p: smooth_l1_loss(p, tg.box, tg.mask), box, epsilon)))
    ctr = Tensor(rng.uniform(0.02, 0.98, size=(1,) + tg.centerness.shape))
    checks.append(ComponentCheck("centerness_loss", grad_check(
        lambda p: centerness_loss(p, tg.centerness, tg.mask), ctr, epsilon)))

    norms = query_grad_norms(cfg, seed)
    failures = [c.name for c in checks if not c.error < tolerance]
    if not np.all(norms > 0):
        failures.append("latent query gradients")
    return GradcheckSummary(checks, norms, tolerance, failures)


# -- ablation ----------------------------------------------------------------


def simulate_split(cfg: RunConfig, n: int, seed: int, offset: int = 0) -> list[list[PointCloudFrame]]:
    """``n`` sequences with scene seeds ``seed * 1_000_000 + offset + i``."""
    base = seed * 1_000_000 + offset
    return [render_sequence(generate_scene(cfg.sim, base + i), base + i) for i in range(n)]


@dataclass
class AblationRun:
    seed: int
    mode: str
    mean_ap: float
    ap: dict
    epochs: int
    seconds: float


def run_ablation(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), n_train: int = 500, n_test: int = 100,
                 modes: Sequence[str] = ("attentivegru", "baseline"),
                 progress: Callable[[str], None] | None = None) -> list[AblationRun]:
    """Train and evaluate each mode on identical simulated data for every seed."""
    from .train import train

    runs = []
    for seed in seeds:
        train_seqs = simulate_split(cfg, n_train, seed)
        test_seqs = simulate_split(cfg, n_test, seed, offset=500_000)
        for mode in modes:
            run_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, mode=mode),
                                          train=dataclasses.replace(cfg.train, seed=seed))
            start = time.perf_counter()
            result = train(run_cfg, train_seqs)
            _, ev = evaluate_model(result.model, test_seqs, run_cfg)
            run = AblationRun(seed, mode, ev.summary.mean_ap, dict(ev.summary.ap), len(result.epochs),
                              time.perf_counter() - start)
            runs.append(run)
            if progress is not None:
                progress(f"seed {seed} {mode}: mAP {run.mean_ap:.4f} ({run.epochs} epochs, {run.seconds:.0f}s)")
    return runs


def relative_gain(runs: Sequence[AblationRun]) -> tuple[float, float, float]:
    """(fusion mean mAP, baseline mean mAP, relative gain) over seeds."""
    fused = float(np.mean([r.mean_ap for r in runs if r.mode == "attentivegru"]))
    base = float(np.mean([r.mean_ap for r in runs if r.mode == "baseline"]))
    return fused, base, (fused - base) / base if base > 0 else float("inf")
