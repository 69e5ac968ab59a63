"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, active_tape, backward_pass, branch_recorder, no_grad

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst_index: tuple[int, ...] | None = None

    def __float__(self) -> float:
        return self.max_rel_error

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _evaluate(function: Callable[[Tensor], Tensor], point: Tensor) -> tuple[float, list[bytes]]:
    with no_grad(), branch_recorder() as log:
        value = function(point)
    if value.size != 1:
        raise ValueError(f"grad_check function must return a scalar, got shape {value.shape}")
    v = float(value.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise ValueError(f"grad_check function returned a non-finite value ({v})")
    return v, log


def grad_check(function: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the tape gradient of ``function`` at ``point`` with central differences.

    ``point`` is perturbed in place (and restored). A coordinate is skipped
    when either perturbation flips a discrete decision recorded by an op
    (binary gate, kink, pooling argmax, bilinear cell), since the function is
    not differentiable across that boundary. Relative error per coordinate is
    ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if point.data.dtype != np.float64:
        raise ValueError("grad_check needs a float64 point")

    base_value, base_branches = _evaluate(function, point)

    was = point.requires_grad
    point.requires_grad = True
    point.grad = None
    active_tape().clear()
    with branch_recorder():
        value = function(point)
    if not np.isfinite(value.data).all():
        raise ValueError("grad_check function returned a non-finite value")
    backward_pass(value)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    point.requires_grad = was

    flat = point.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))

    worst, worst_idx, checked, skipped = 0.0, None, 0, 0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus, br_plus = _evaluate(function, point)
        flat[i] = orig - epsilon
        f_minus, br_minus = _evaluate(function, point)
        flat[i] = orig
        if br_plus != base_branches or br_minus != base_branches:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        checked += 1
        if err > worst:
            worst, worst_idx = err, tuple(int(k) for k in np.unravel_index(i, point.shape))
    del base_value
    return GradCheckReport(worst, checked, skipped, worst_idx)
