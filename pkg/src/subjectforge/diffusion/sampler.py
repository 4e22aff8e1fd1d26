"""Diffusion training loss, guidance combination, and ancestral/DDIM sampling."""

from __future__ import annotations

import numpy as np

from ..numerics import ShapeError, Tensor, no_tape, ops
from .schedule import NoiseSchedule, forward_diffuse, posterior_mean
from .vae import LATENT_SHAPE


def diffusion_loss(z0: Tensor, cond: Tensor, denoiser, sched: NoiseSchedule,
                   rng: np.random.Generator | None = None,
                   t: np.ndarray | None = None,
                   eps: Tensor | None = None) -> Tensor:
    """Denoising objective: mean squared error between injected and predicted
    noise at a uniformly drawn step. Differentiable w.r.t. the denoiser's
    parameters and w.r.t. cond. Explicit (t, eps) override the draws, which
    lets paired runs share their noise."""
    if z0.ndim != 4:
        raise ShapeError(f"expected batched latents, got {z0.shape}")
    b = z0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=b)
    if eps is None:
        eps = Tensor(rng.normal(size=z0.shape).astype(z0.dtype.type), _check=False)
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} vs {z0.shape}")
    zt = forward_diffuse(z0, t, eps, sched)
    pred = denoiser(zt, cond, t)
    d = ops.sub(pred, eps)
    return ops.mean(ops.mul(d, d))


def apply_null_dropout(cond: Tensor, null_cond: Tensor, p: float,
                       rng: np.random.Generator) -> Tensor:
    """Swap each sample's condition for the learned null row-matrix w.p. p."""
    b = cond.shape[0]
    dropped = rng.random(b) < p
    if not dropped.any():
        return cond
    rows = [null_cond if dropped[i] else cond[i] for i in range(b)]
    return ops.stack(rows, axis=0)


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, w: float) -> Tensor:
    """Guided noise estimate w*eps_cond - (w-1)*eps_uncond.

    Computed as eps_uncond + w*(eps_cond - eps_uncond), with fast paths at
    w=0 and w=1, so the three guidance identities hold bit-exactly.
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"guidance shapes {eps_cond.shape} vs "
                         f"{eps_uncond.shape}")
    w = float(w)
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return ops.add(eps_uncond, ops.scale(ops.sub(eps_cond, eps_uncond), w))


def predict_clean(zt: Tensor, eps_hat: Tensor, t: int,
                  sched: NoiseSchedule) -> Tensor:
    """Invert the closed-form forward step: z0 = (z_t - sqrt(1-ab) e)/sqrt(ab)."""
    ab = sched.alpha_bar(int(t))
    return ops.scale(ops.sub(zt, ops.scale(eps_hat, np.sqrt(1.0 - ab))),
                     1.0 / np.sqrt(ab))


def _ddim_steps(T: int, steps: int) -> list[int]:
    return sorted({int(round(v)) for v in np.linspace(1, T, steps)})


def sample(cond: Tensor, mode: str, steps: int, w: float, denoiser,
           sched: NoiseSchedule, rng: np.random.Generator,
           null_cond: Tensor | None = None) -> Tensor:
    """Draw one latent from the decoder given a condition matrix.

    ddpm: ancestral sampling over the full chain (variance beta_t per step).
    ddim: deterministic update over an evenly spaced step subset; with a
    fixed seed the output is bit-identical across runs. The unconditional
    guidance branch uses null_cond (required when w != 1).
    """
    if steps > sched.T or steps < 1:
        raise ShapeError(f"steps={steps} outside [1, {sched.T}]")
    if w < 0:
        raise ShapeError(f"guidance scale {w} < 0")
    if mode not in ("ddpm", "ddim"):
        raise ShapeError(f"unknown sampler mode {mode!r}")
    if w != 1.0 and null_cond is None:
        raise ShapeError("guidance with w != 1 needs the null condition")

    with no_tape():
        z = Tensor(rng.normal(size=LATENT_SHAPE).astype(np.float32),
                   _check=False)

        def guided(zt: Tensor, t: int) -> Tensor:
            e_c = denoiser(zt, cond, t)
            if w == 1.0:
                return e_c
            e_u = denoiser(zt, null_cond, t)
            return cfg_combine(e_c, e_u, w)

        if mode == "ddpm":
            for t in range(sched.T, 0, -1):
                mu = posterior_mean(z, guided(z, t), t, sched)
                if t > 1:
                    noise = rng.normal(size=LATENT_SHAPE).astype(np.float32)
                    z = ops.add(mu, ops.scale(Tensor(noise, _check=False),
                                              np.sqrt(sched.beta(t))))
                else:
                    z = mu
            return z

        taus = _ddim_steps(sched.T, steps)
        for i in range(len(taus) - 1, -1, -1):
            t = taus[i]
            ab_prev = sched.alpha_bar(taus[i - 1]) if i > 0 else 1.0
            e = guided(z, t)
            z0_hat = predict_clean(z, e, t, sched)
            z = ops.add(ops.scale(z0_hat, np.sqrt(ab_prev)),
                        ops.scale(e, np.sqrt(1.0 - ab_prev)))
        return z
