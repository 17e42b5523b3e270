"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# Relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR) so
# coordinates with vanishing gradient are judged on absolute error instead.
REL_FLOOR = 1e-6


@dataclass
class GradReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]] | Sequence[Tensor],
                      h: float = 1e-5, n_samples: int | None = 8, rng: np.random.Generator | None = None,
                      budget: int | None = None) -> GradReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    Args:
        f: closure recomputing the scalar loss from the current parameter values.
            It must be deterministic (no dropout, no running-stat dependence).
        params: tensors (optionally named) to perturb in place.
        h: finite-difference step.
        n_samples: coordinates sampled per parameter; ``None`` checks all of them.
        rng: source for the coordinate sample.
        budget: if given, a total number of coordinates spread across all
            parameters (overrides ``n_samples``).

    Returns:
        Per-parameter maximum relative error.
    """
    rng = rng or np.random.default_rng(0)
    named = [(p if isinstance(p, tuple) else (f"param{i}", p)) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in named}

    if budget is not None:
        sizes = np.array([p.size for _, p in named], dtype=float)
        owners = rng.choice(len(named), size=budget, p=sizes / sizes.sum())
        per_param = np.bincount(owners, minlength=len(named))
    else:
        per_param = [n_samples] * len(named)

    report = GradReport()
    for (name, p), k in zip(named, per_param):
        if k == 0:
            continue
        flat = p.data.reshape(-1)
        if k is None or k >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=int(k), replace=False)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[idx], numeric))
        report.max_rel_error[name] = worst
        report.n_checked[name] = len(coords)
    return report
