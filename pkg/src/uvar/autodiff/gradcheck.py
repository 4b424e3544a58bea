from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonFiniteError(ValueError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    rel_tol: float
    worst: tuple[int, tuple[int, ...]] | None = None  # (operand, element index)
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol

    def __bool__(self) -> bool:
        return self.passed


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    rel_tol: float = 1e-6,
    step: float = 1e-5,
    floor: float = 1e-4,
) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    The per-element error is |a - n| / (max(|a|, |n|) + floor * max(1, |f(x)|)).
    The floor keeps components that sit at finite-difference round-off level
    from dominating the relative error.
    """
    points = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    for i, p in enumerate(points):
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"gradcheck: input {i} has non-finite entries")

    leaves = [Tensor(p.copy(), requires_grad=True) for p in points]
    out = f(*leaves)
    if out.size != 1:
        raise ValueError(f"gradcheck: f must return a scalar, got shape {out.shape}")
    f0 = float(out.data)
    if not np.isfinite(f0):
        raise NonFiniteError(f"gradcheck: f is non-finite at the point ({f0})")
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    for i, g in enumerate(analytic):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradcheck: reverse-mode gradient of input {i} is non-finite")

    def evaluate(vals: list[np.ndarray]) -> float:
        with no_grad():
            v = float(f(*[Tensor(x) for x in vals]).data)
        if not np.isfinite(v):
            raise NonFiniteError("gradcheck: f became non-finite under perturbation")
        return v

    scale = floor * max(1.0, abs(f0))
    worst_rel, worst_abs, worst = 0.0, 0.0, None
    per_input = []
    for i, p in enumerate(points):
        local = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            fp = evaluate(points)
            p[idx] = orig - step
            fm = evaluate(points)
            p[idx] = orig
            numeric = (fp - fm) / (2 * step)
            a = float(analytic[i][idx])
            abs_err = abs(a - numeric)
            rel = abs_err / (max(abs(a), abs(numeric)) + scale)
            local = max(local, rel)
            worst_abs = max(worst_abs, abs_err)
            if rel > worst_rel:
                worst_rel, worst = rel, (i, idx)
        per_input.append(local)
    return GradcheckReport(worst_rel, worst_abs, rel_tol, worst, per_input)
