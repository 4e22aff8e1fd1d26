"""Finite-difference oracle for reverse-mode gradients.

Central differences around the current parameter values, compared against
tape gradients entry by entry. The loss closure must be deterministic; this
is verified by evaluating it twice before any perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradReport:
    """Worst-case relative error per parameter plus an overall verdict."""

    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    ok: bool = True
    tol: float = 1e-4

    def __str__(self) -> str:
        lines = [f"gradcheck: max_rel_error={self.max_rel_error:.3e} "
                 f"tol={self.tol:.1e} ok={self.ok}"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def finite_diff_check(loss_fn: Callable[[], Tensor],
                      params: Sequence[Tensor],
                      eps: float = 1e-5,
                      tol: float = 1e-4,
                      max_entries: int = 64,
                      rng: np.random.Generator | None = None) -> GradReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` builds and returns a scalar loss; it is called fresh for every
    evaluation, under a tape for the analytic pass and without one for the
    probes. For parameters larger than ``max_entries`` a random subset of
    entries is probed (exhaustive below that).
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 params, got {p.dtype} "
                             f"for {p.name or 'unnamed'}")

    base_a = float(loss_fn().data)
    base_b = float(loss_fn().data)
    if base_a != base_b:
        raise ValueError("loss_fn is not deterministic: "
                         f"{base_a!r} != {base_b!r}")

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape, params=params)

    if rng is None:
        rng = np.random.default_rng(0)

    per_param: dict[str, float] = {}
    worst = 0.0
    for k, p in enumerate(params):
        g = grads[p]
        flat = p.data.reshape(-1)
        gflat = g.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            probe = np.arange(n)
        else:
            probe = rng.choice(n, size=max_entries, replace=False)
        worst_here = 0.0
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst_here = max(worst_here, _rel_err(float(gflat[i]), numeric))
        name = p.name or f"param{k}"
        per_param[name] = worst_here
        worst = max(worst, worst_here)

    return GradReport(max_rel_error=worst, per_param=per_param,
                      ok=worst <= tol, tol=tol)
