"""Adam training with early stopping and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bev import SequenceBatch, prepare_sequence
from .config import RunConfig, to_ini
from .head import TargetMaps, assign_targets, detection_loss
from .model import Detector
from .serialize import load_tensors, save_tensors
from .sim import PointCloudFrame
from .tensor import backward_pass, no_grad

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


@dataclass
class Example:
    batch: SequenceBatch
    targets: TargetMaps


def make_examples(sequences: Sequence[Sequence[PointCloudFrame]], detector: Detector) -> list[Example]:
    out = []
    for frames in sequences:
        batch = prepare_sequence(frames, detector.grid)
        out.append(Example(batch, assign_targets(batch.gt_boxes, detector.head_grid)))
    return out


@dataclass
class TrainResult:
    model: Detector
    epochs: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


def split_indices(n: int, val_fraction: float) -> tuple[list[int], list[int]]:
    """Trailing ``val_fraction`` of the sequences is held out (at least one when n >= 2)."""
    n_val = 0
    if n >= 2 and val_fraction > 0:
        n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return list(range(n - n_val)), list(range(n - n_val, n))


def _loss(model: Detector, ex: Example, cfg: RunConfig):
    t = cfg.train
    return detection_loss(model(ex.batch), ex.targets, t.box_weight, t.focal_alpha, t.focal_gamma,
                          normalize=t.focal_norm)


def validation_loss(model: Detector, examples: Sequence[Example], cfg: RunConfig) -> float:
    if not examples:
        return float("nan")
    with no_grad():
        return float(np.mean([_loss(model, ex, cfg).total.item() for ex in examples]))


def lr_for_epoch(cfg: RunConfig, epoch: int) -> float:
    """Constant rate, scaled by ``final_lr_factor`` in the last scheduled epoch."""
    t = cfg.train
    return t.lr * (t.final_lr_factor if epoch == t.epochs - 1 else 1.0)


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.train.precision == "f32" else np.float64


def save_checkpoint(path: str | Path, model: Detector, opt: Adam, best: dict, meta: dict) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name in opt.m:
        arrays[f"adam_m/{name}"] = opt.m[name]
        arrays[f"adam_v/{name}"] = opt.v[name]
    for name, arr in best.items():
        arrays[f"best/{name}"] = arr
    save_tensors(path, arrays, dict(meta, adam_t=opt.t))


def _section(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_model(path: str | Path, cfg: RunConfig, which: str = "best") -> Detector:
    """Detector built from ``cfg`` with weights from a checkpoint.

    Shape disagreements between the config and the stored tensors raise
    ``ValueError`` naming the tensor.
    """
    arrays, _ = load_tensors(path)
    model = Detector(cfg.model, cfg.train.seed, _dtype(cfg))
    state = _section(arrays, f"{which}/") or _section(arrays, "param/")
    model.load_state_dict(state)
    return model


def train(cfg: RunConfig, sequences: Sequence[Sequence[PointCloudFrame]], ckpt: str | Path | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Train a detector on ``sequences``; returns the best-validation model.

    A checkpoint (parameters, Adam moments, best parameters, epoch counter
    and RNG state) is written to ``ckpt`` after every epoch. ``resume``
    continues from such a checkpoint and reproduces the uninterrupted run.
    Checkpoints are taken at epoch boundaries, so a run cut short by
    ``max_steps`` inside an epoch resumes at the start of the next one.
    """
    t = cfg.train
    model = Detector(cfg.model, t.seed, _dtype(cfg))
    params = dict(model.named_parameters())
    opt = Adam(params)
    rng = np.random.default_rng([t.seed, 0x7A1])
    examples = make_examples(sequences, model)
    train_idx, val_idx = split_indices(len(examples), t.val_fraction)
    val_examples = [examples[i] for i in val_idx]

    result = TrainResult(model)
    start_epoch, step = 0, 0
    best_val, bad_epochs = math.inf, 0
    best = model.state_dict()
    if resume is not None:
        arrays, meta = load_tensors(resume)
        model.load_state_dict(_section(arrays, "param/"))
        for name in params:
            opt.m[name] = arrays[f"adam_m/{name}"]
            opt.v[name] = arrays[f"adam_v/{name}"]
        opt.t = meta["adam_t"]
        best = _section(arrays, "best/")
        start_epoch, step = meta["epoch"], meta["step"]
        best_val, bad_epochs = meta["best_val"], meta["bad_epochs"]
        rng.bit_generator.state = meta["rng"]
        result.epochs = meta["log"]
        if meta.get("stopped"):
            start_epoch = t.epochs

    for epoch in range(start_epoch, t.epochs):
        lr = lr_for_epoch(cfg, epoch)
        order = rng.permutation(train_idx) if train_idx else []
        losses = []
        for i in order:
            model.zero_grad()
            parts = _loss(model, examples[int(i)], cfg)
            value = parts.total.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            backward_pass(parts.total)
            opt.step(lr)
            losses.append(value)
            step += 1
            if t.max_steps and step >= t.max_steps:
                break
        result.step_losses.extend(losses)
        val = validation_loss(model, val_examples, cfg)
        entry = {"epoch": epoch, "lr": lr, "steps": len(losses),
                 "train_loss": float(np.mean(losses)) if losses else float("nan"), "val_loss": val}
        result.epochs.append(entry)
        log.info("epoch %d lr %.2g train %.5f val %.5f", epoch, lr, entry["train_loss"], val)
        if not val_examples or val < best_val:
            best_val = val if val_examples else best_val
            bad_epochs = 0
            best = model.state_dict()
        else:
            bad_epochs += 1
        early = bad_epochs >= t.patience
        stop = early or bool(t.max_steps and step >= t.max_steps)
        if ckpt is not None:
            # only early stopping is final; a step budget can be extended on resume
            meta = {"epoch": epoch + 1, "step": step, "best_val": best_val, "bad_epochs": bad_epochs,
                    "rng": rng.bit_generator.state, "log": result.epochs, "stopped": early,
                    "config": to_ini(cfg)}
            save_checkpoint(ckpt, model, opt, best, meta)
        if stop:
            result.stopped_early = early
            break

    model.load_state_dict(best)
    return result


def write_loss_log(path: str | Path, epochs: Sequence[dict]) -> None:
    lines = ["epoch,lr,steps,train_loss,val_loss"]
    lines += [f"{e['epoch']},{e['lr']!r},{e['steps']},{e['train_loss']!r},{e['val_loss']!r}" for e in epochs]
    Path(path).write_text("\n".join(lines) + "\n")


def rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)
