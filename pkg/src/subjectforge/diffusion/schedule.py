"""Noise schedule and the closed-form forward/reverse diffusion steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ShapeError, Tensor, ops

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates: betas, alphas = 1-betas, and their running
    product alpha_bars. Index convention: position i holds step t = i+1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        # alpha_bar(0) = 1 is the clean-data boundary used by ddim
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ShapeError(f"step t={t} outside [1, {self.T}]")


def build_schedule(T: int = DEFAULT_T,
                   beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 2:
        raise ShapeError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ShapeError(f"non-increasing schedule: start={beta_start} "
                         f"end={beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _per_sample(coeffs: np.ndarray, t) -> np.ndarray:
    return coeffs[np.asarray(t) - 1]


def forward_diffuse(z0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Jump straight to step t: z_t = sqrt(a_bar_t) z_0 + sqrt(1-a_bar_t) eps.

    t is a single step or a per-sample vector matching the leading dim.
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {z0.shape}")
    if np.isscalar(t) or isinstance(t, (int, np.integer)):
        sched._check_t(int(t))
        ab = sched.alpha_bar(int(t))
        return ops.add(ops.scale(z0, np.sqrt(ab)),
                       ops.scale(eps, np.sqrt(1.0 - ab)))
    t = np.asarray(t)
    if t.shape != (z0.shape[0],):
        raise ShapeError(f"per-sample t shape {t.shape} vs batch {z0.shape[0]}")
    if t.min() < 1 or t.max() > sched.T:
        raise ShapeError(f"step out of range in {t}")
    ab = _per_sample(sched.alpha_bars, t)
    return ops.add(ops.row_scale(z0, np.sqrt(ab)),
                   ops.row_scale(eps, np.sqrt(1.0 - ab)))


def posterior_mean(zt: Tensor, eps_hat: Tensor, t: int,
                   sched: NoiseSchedule) -> Tensor:
    """Reverse-step mean mu = (z_t - beta_t/sqrt(1-a_bar_t) eps_hat)/sqrt(alpha_t)."""
    if eps_hat.shape != zt.shape:
        raise ShapeError(f"eps shape {eps_hat.shape} != z shape {zt.shape}")
    t = int(t)
    beta = sched.beta(t)
    alpha = sched.alpha(t)
    ab = sched.alpha_bar(t)
    coef = beta / np.sqrt(1.0 - ab)
    return ops.scale(ops.sub(zt, ops.scale(eps_hat, coef)), 1.0 / np.sqrt(alpha))
