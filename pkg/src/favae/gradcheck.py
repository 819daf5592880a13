"""Central finite-difference verification of analytic gradients.

Used by the test suite against every differentiable primitive and the full
model forward pass.  The loss callable must be deterministic: reseed any
internal rng per call and freeze batch-norm running-stat updates, otherwise
the two finite-difference evaluations measure different functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward, capture_relu_signs


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    worst: tuple[str, int, float, float] | None = None
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_rel_err < tol


def _rel_err(a: float, n: float, floor: float = 1e-4) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], *,
                    step: float = 1e-5, coords_per_param: int | None = None,
                    tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare taped gradients of ``loss_fn`` against central differences.

    Coordinates whose +/-step evaluations flip any ReLU input sign are
    skipped: the finite difference straddles a kink there and measures
    nothing meaningful.  Run the model in float64; float32 has no headroom
    at step 1e-5.
    """
    for p in params.values():
        p.zero_grad()
        p.node_id = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    pick = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, n_checked=0, n_skipped=0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if coords_per_param is None or size <= coords_per_param:
            indices = np.arange(size)
        else:
            indices = pick.choice(size, size=coords_per_param, replace=False)
        for i in indices:
            orig = flat[i]
            signs_plus: list[np.ndarray] = []
            signs_minus: list[np.ndarray] = []
            try:
                flat[i] = orig + step
                capture_relu_signs(signs_plus)
                f_plus = float(loss_fn().data)
                flat[i] = orig - step
                capture_relu_signs(signs_minus)
                f_minus = float(loss_fn().data)
            finally:
                capture_relu_signs(None)
                flat[i] = orig
            if any(sp.shape != sm.shape or np.any(sp != sm)
                   for sp, sm in zip(signs_plus, signs_minus)):
                report.n_skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            err = _rel_err(a, numeric)
            report.n_checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, int(i), a, numeric)
            if err >= tol:
                report.failures.append((name, int(i), a, numeric))
    return report
