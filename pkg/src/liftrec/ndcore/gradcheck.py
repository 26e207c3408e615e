"""Autodiff versus central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .params import ParamStore
from .tensor import Tensor, no_grad

# gradients smaller than this are compared in absolute terms
_SCALE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        lines = [f"grad check ({'pass' if self.passed else 'FAIL'}, tol={self.tolerance:g})"]
        for k, e in self.errors.items():
            lines.append(f"  {k:<28s} {e:.3e}{'  <-- FAIL' if not e < self.tolerance else ''}")
        return "\n".join(lines)


def grad_check(
    forward: Callable[[], Tensor],
    params: ParamStore | Mapping[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of ``forward()`` with central differences.

    The error of a parameter is max |autodiff - numeric| over its elements,
    divided by the larger of its largest gradient magnitude and 1e-6.
    ``max_elements`` samples that many entries per parameter instead of all.
    """
    items = list(params.items())
    for _, t in items:
        t.grad = np.zeros_like(t.data)
    loss = forward()
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in items}

    report = GradCheckReport(tolerance)
    rng = rng or np.random.default_rng(0)
    for name, t in items:
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view: writes perturb the parameter
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = forward().item()
                flat[i] = orig - h
                fm = forward().item()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * h)
        a = analytic[name].reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), _SCALE_FLOOR)
        report.errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    for _, t in items:
        t.grad = None
    return report
