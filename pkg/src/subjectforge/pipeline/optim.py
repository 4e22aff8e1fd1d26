"""AdamW with decoupled weight decay and a warmup/decay schedule."""

from __future__ import annotations

import numpy as np

from ..numerics import Tensor


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear ramp to peak over warmup steps, then linear decay to zero."""
    if total <= 0:
        return 0.0
    if step < warmup:
        return peak * (step + 1) / max(warmup, 1)
    if total == warmup:
        return peak
    frac = (step - warmup) / (total - warmup)
    return peak * max(0.0, 1.0 - frac)


class AdamW:
    """Decoupled-decay Adam over an explicit parameter list.

    Moment buffers are keyed by position, so the same parameter order must be
    used for the optimizer's whole life; state() round-trips through
    checkpoints for exact resumption.
    """

    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr: float) -> None:
        """Apply one update. grads maps param -> gradient (Tensor or array);
        params absent from the map are left untouched."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            if p not in grads:
                continue
            g = grads[p]
            if isinstance(g, Tensor):
                g = g.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.assign_((p.data - lr * update).astype(p.dtype.type))

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "step_count": np.array([self.step_count], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"][0])
        for i in range(len(self.params)):
            self.m[i] = state[f"m.{i}"].copy()
            self.v[i] = state[f"v.{i}"].copy()
