"""Instruction tuning against a frozen latent decoder.

Two gradient modes share one objective. The full mode backpropagates the
denoising loss through the frozen decoder into the condition producer. The
distillation mode treats the decoder's noise residual as a ready-made
gradient signal for the produced object and never records the decoder on the
tape, so no backward pass crosses the decoder at all. On a decoder whose
response to its condition is the identity, the two modes coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import datagen
from .diffusion.sampler import diffusion_loss
from .diffusion.schedule import NoiseSchedule, build_schedule, forward_diffuse
from .diffusion.vae import LATENT_SHAPE
from .mllm import InterleavedSequence, tokenize_interleaved
from .numerics import Tape, Tensor, backward, no_tape, ops
from .numerics.nn import ParamModule, init_param
from .numerics.rng import derive_seed, spawn_rng
from .numerics.tensor import ShapeError

DENOISER_SCOPE = "denoiser"


class FreezeViolationError(RuntimeError):
    """A parameter contracted to stay frozen was trained or drifted."""


# -- batch plumbing ---------------------------------------------------------

@dataclass(frozen=True)
class InstructSample:
    """One training example: a tokenized prompt, its target render, and the
    sample family it came from."""

    seq: InterleavedSequence
    target: np.ndarray
    kind: str


_KIND_BY_TYPE = {
    datagen.ConstructedSample: "constructed",
    datagen.EditSample: "edit",
    datagen.CaptionSample: "caption",
}


def build_instruct_sample(sample, vocab, anchor) -> InstructSample:
    kind = _KIND_BY_TYPE.get(type(sample))
    if kind is None:
        raise ShapeError(f"unknown sample type {type(sample).__name__}")
    seq = tokenize_interleaved(sample.items, vocab, anchor)
    return InstructSample(seq=seq, target=sample.target, kind=kind)


def build_instruct_batch(samples, vocab, anchor) -> list[InstructSample]:
    return [build_instruct_sample(s, vocab, anchor) for s in samples]


# -- freeze contract --------------------------------------------------------

def snapshot_digests(modules: dict[str, ParamModule]) -> dict[str, str]:
    return {name: m.digest() for name, m in modules.items()}


def check_digests(modules: dict[str, ParamModule],
                  saved: dict[str, str]) -> None:
    for name, want in saved.items():
        got = modules[name].digest()
        if got != want:
            raise FreezeViolationError(f"frozen module {name!r} changed: "
                                       f"{want[:12]} -> {got[:12]}")


def _assert_disjoint(trainable: list[Tensor],
                     frozen_modules: list[ParamModule]) -> None:
    frozen_ids = {id(p) for m in frozen_modules if m is not None
                  for _, p in m.named_params()}
    for p in trainable:
        if id(p) in frozen_ids:
            raise FreezeViolationError("trainable set overlaps a frozen "
                                       "module")


# -- noise draws ------------------------------------------------------------

def draw_step_noise(n: int, shape: tuple[int, ...], sched: NoiseSchedule,
                    rng: np.random.Generator, dtype=np.float32):
    """One (t, eps) pack shared between paired gradient computations."""
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.normal(size=(n,) + shape).astype(dtype)
    return t, Tensor(eps, _check=False)


# -- generic gradient cores -------------------------------------------------

def full_gradient(cond_fn, params, z0: Tensor, denoiser,
                  sched: NoiseSchedule, t: np.ndarray, eps: Tensor):
    """Denoising loss with backprop through the decoder into the condition.

    The decoder call is wrapped in a named tape scope so tests can tell the
    two modes apart structurally.
    """
    with Tape() as tape:
        cond = cond_fn()

        def scoped(zt, c, tv):
            with tape.scope(DENOISER_SCOPE):
                return denoiser(zt, c, tv)

        loss = diffusion_loss(z0, cond, scoped, sched, t=t, eps=eps)
        grads = backward(loss, tape, params)
    return float(loss.data), grads, tape


_PAIRING_CACHE: dict[tuple, np.ndarray] = {}


def _residual_to_cond(resid: np.ndarray, cond_shape: tuple[int, ...]
                      ) -> np.ndarray:
    """Carry a per-sample noise residual into the condition's geometry.

    Identity when the spaces already coincide; a plain reshape when only the
    layout differs; otherwise a fixed seeded isometry, so the transport is
    deterministic and norm-friendly but never secretly re-derives the
    decoder's response.
    """
    b = resid.shape[0]
    es, cs = resid.shape[1:], tuple(cond_shape[1:])
    if es == cs:
        return resid
    ne, nc = int(np.prod(es)), int(np.prod(cs))
    if ne == nc:
        return resid.reshape((b,) + cs)
    key = (es, cs)
    if key not in _PAIRING_CACHE:
        g = np.random.default_rng(derive_seed(0xA11C, f"{ne}->{nc}"))
        q, _ = np.linalg.qr(g.normal(size=(max(ne, nc), min(ne, nc))))
        _PAIRING_CACHE[key] = q if nc >= ne else q.T
    p = _PAIRING_CACHE[key]
    flat = resid.reshape(b, ne)
    return (flat @ p.T).reshape((b,) + cs)


def sds_gradient(cond_fn, params, z0: Tensor, denoiser,
                 sched: NoiseSchedule, t: np.ndarray, eps: Tensor):
    """Residual-times-producer-Jacobian gradient, decoder kept off the tape.

    The decoder runs purely as data: its prediction minus the injected noise
    becomes a constant coefficient on the produced condition, scaled to match
    the mean-squared loss convention, and only the condition producer is
    differentiated.
    """
    with Tape() as tape:
        cond = cond_fn()
        with no_tape():
            zt = forward_diffuse(Tensor(z0.data, _check=False), t,
                                 Tensor(eps.data, _check=False), sched)
            pred = denoiser(zt, Tensor(cond.data, _check=False), t)
        resid = pred.data - eps.data
        coeff = (2.0 / resid.size) * _residual_to_cond(resid, cond.shape)
        proxy = ops.tsum(ops.mul(Tensor(coeff.astype(cond.dtype.type),
                                        _check=False), cond))
        grads = backward(proxy, tape, params)
    return float(np.mean(resid * resid)), grads, tape


def full_latent_gradient(latent_fn, params, cond: Tensor, denoiser,
                         sched: NoiseSchedule, t: np.ndarray, eps: Tensor):
    """Full mode when the trainable produces the clean latent itself."""
    with Tape() as tape:
        z0 = latent_fn()

        def scoped(zt, c, tv):
            with tape.scope(DENOISER_SCOPE):
                return denoiser(zt, c, tv)

        loss = diffusion_loss(z0, cond, scoped, sched, t=t, eps=eps)
        grads = backward(loss, tape, params)
    return float(loss.data), grads, tape


def sds_latent_gradient(latent_fn, params, cond: Tensor, denoiser,
                        sched: NoiseSchedule, t: np.ndarray, eps: Tensor):
    """Distillation mode for a latent producer: the residual multiplies the
    producer's Jacobian directly; shapes always agree here."""
    with Tape() as tape:
        z0 = latent_fn()
        with no_tape():
            zt = forward_diffuse(Tensor(z0.data, _check=False), t,
                                 Tensor(eps.data, _check=False), sched)
            pred = denoiser(zt, cond, t)
        resid = pred.data - eps.data
        coeff = (2.0 / resid.size) * resid
        proxy = ops.tsum(ops.mul(Tensor(coeff.astype(z0.dtype.type),
                                        _check=False), z0))
        grads = backward(proxy, tape, params)
    return float(np.mean(resid * resid)), grads, tape


# -- stage-3 entry points ---------------------------------------------------

def stage3_condition(seq: InterleavedSequence, mllm, aligner) -> Tensor:
    _, source = mllm.forward(seq)
    return aligner.encode(source)


def _stage3_setup(batch, mllm, aligner, denoiser, vae):
    params = ([p for _, p in mllm.named_params()]
              + [p for _, p in aligner.named_params()])
    frozen = [vae]
    if isinstance(denoiser, ParamModule):
        frozen.append(denoiser)
    _assert_disjoint(params, frozen)
    with no_tape():
        targets = Tensor(np.stack([s.target for s in batch]), _check=False)
        z0 = Tensor(vae.encode(targets).data, _check=False)
    return params, z0


def instruct_grad_full(batch, mllm, aligner, denoiser, vae,
                       sched: NoiseSchedule,
                       rng: np.random.Generator | None = None,
                       t: np.ndarray | None = None,
                       eps: Tensor | None = None):
    """Stage-3 training step gradients, full backprop mode."""
    params, z0 = _stage3_setup(batch, mllm, aligner, denoiser, vae)
    if t is None or eps is None:
        t, eps = draw_step_noise(len(batch), LATENT_SHAPE, sched, rng)

    def cond_fn():
        return ops.stack([stage3_condition(s.seq, mllm, aligner)
                          for s in batch], axis=0)

    loss, grads, _ = full_gradient(cond_fn, params, z0, denoiser, sched,
                                   t, eps)
    return loss, grads


def sds_grad(batch, mllm, aligner, denoiser, vae, sched: NoiseSchedule,
             rng: np.random.Generator | None = None,
             t: np.ndarray | None = None,
             eps: Tensor | None = None):
    """Stage-3 training step gradients, distillation shortcut mode."""
    params, z0 = _stage3_setup(batch, mllm, aligner, denoiser, vae)
    if t is None or eps is None:
        t, eps = draw_step_noise(len(batch), LATENT_SHAPE, sched, rng)

    def cond_fn():
        return ops.stack([stage3_condition(s.seq, mllm, aligner)
                          for s in batch], axis=0)

    loss, grads, _ = sds_gradient(cond_fn, params, z0, denoiser, sched,
                                  t, eps)
    return loss, grads


# -- analytic decoders and producers for probing ----------------------------

class AffineDecoder:
    """Denoiser that is linear in the noisy latent and affine in the
    condition: pred = mix(z) + gain * cond, with condition shaped like the
    latent. Its condition response is exactly gain times the identity, which
    makes the two gradient modes comparable in closed form."""

    def __init__(self, shape: tuple[int, ...], gain: float,
                 rng: np.random.Generator, dtype=np.float64):
        self.shape = tuple(shape)
        self.gain = float(gain)
        n = int(np.prod(shape))
        self.mix = Tensor((rng.normal(size=(n, n)) / np.sqrt(n))
                          .astype(dtype), _check=False)

    def __call__(self, zt: Tensor, cond: Tensor, t) -> Tensor:
        if cond.shape != zt.shape:
            raise ShapeError(f"affine decoder wants condition shaped "
                             f"{zt.shape}, got {cond.shape}")
        b = zt.shape[0]
        n = int(np.prod(self.shape))
        flat = ops.reshape(zt, (b, n))
        mixed = ops.reshape(ops.matmul(flat, self.mix), zt.shape)
        return ops.add(mixed, ops.scale(cond, self.gain))


class ConditionProducer(ParamModule):
    """Minimal trainable map from fixed features to a condition block."""

    def __init__(self, feat_dim: int, out_shape: tuple[int, ...],
                 rng: np.random.Generator):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.w = init_param(rng, (feat_dim, int(np.prod(out_shape))))

    def __call__(self, feats: Tensor) -> Tensor:
        flat = ops.matmul(feats, self.w)
        return ops.reshape(flat, (feats.shape[0],) + self.out_shape)


class LatentProducer(ParamModule):
    """A free clean-latent parameter per probe batch, the smallest possible
    producer with identity Jacobian."""

    def __init__(self, batch: int, shape: tuple[int, ...],
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.z = Tensor(rng.normal(size=(batch,) + tuple(shape))
                        .astype(dtype) * 0.5, requires_grad=True)

    def __call__(self) -> Tensor:
        # pass through one recorded op so the tape sees the parameter
        return ops.scale(self.z, 1.0)


# -- paired training probe --------------------------------------------------

@dataclass
class ProbeReport:
    """Per-step training losses for both modes plus gradient agreement."""

    full_losses: list[float]
    sds_losses: list[float]
    update_cosines: list[float]
    final_param_gap: float


def _cosine(ga: dict, gb: dict, order: list[tuple[Tensor, Tensor]]) -> float:
    va = np.concatenate([ga[a].data.ravel() for a, _ in order])
    vb = np.concatenate([gb[b].data.ravel() for _, b in order])
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(va @ vb / (na * nb))


def equivalence_probe(steps: int, seed: int, *, decoder=None,
                      sched: NoiseSchedule | None = None,
                      mode: str = "condition",
                      fixed_cond: Tensor | None = None,
                      batch: int = 4, lr: float = 0.05,
                      dtype=np.float64) -> ProbeReport:
    """Train two copies of one producer, full mode versus distillation mode,
    with shared noise draws, and report how the trajectories compare.

    condition mode (default): a linear producer feeds an analytic affine
    decoder whose condition response is the identity, so the two modes must
    agree step for step. latent mode: the producer is a free clean latent
    pushed through an arbitrary decoder under a fixed condition, the form in
    which the shortcut is classically applied.
    """
    if sched is None:
        sched = build_schedule(100, 1e-4, 0.02)
    rng = spawn_rng(seed, "probe")
    shape = LATENT_SHAPE

    if mode == "condition":
        if decoder is None:
            decoder = AffineDecoder(shape, 1.0, spawn_rng(seed, "probe-dec"),
                                    dtype=dtype)
        feats = Tensor(rng.normal(size=(batch, 8)).astype(dtype),
                       _check=False)
        prod_a = ConditionProducer(8, shape, spawn_rng(seed, "probe-init"))
        prod_b = ConditionProducer(8, shape, spawn_rng(seed, "probe-init"))
        if dtype is not np.float32:
            prod_a.convert_(dtype)
            prod_b.convert_(dtype)
        z0 = Tensor(rng.normal(size=(batch,) + shape).astype(dtype),
                    _check=False)

        def run(producer, grad_fn, t, eps):
            params = [p for _, p in producer.named_params()]
            return grad_fn(lambda: producer(feats), params, z0, decoder,
                           sched, t, eps)

        full_run = lambda t, eps: run(prod_a, full_gradient, t, eps)
        sds_run = lambda t, eps: run(prod_b, sds_gradient, t, eps)
    elif mode == "latent":
        if decoder is None or fixed_cond is None:
            raise ShapeError("latent mode needs a decoder and a fixed "
                             "condition")
        prod_a = LatentProducer(batch, shape, spawn_rng(seed, "probe-init"),
                                dtype=dtype)
        prod_b = LatentProducer(batch, shape, spawn_rng(seed, "probe-init"),
                                dtype=dtype)

        def full_run(t, eps):
            params = [p for _, p in prod_a.named_params()]
            return full_latent_gradient(lambda: prod_a(), params, fixed_cond,
                                        decoder, sched, t, eps)

        def sds_run(t, eps):
            params = [p for _, p in prod_b.named_params()]
            return sds_latent_gradient(lambda: prod_b(), params, fixed_cond,
                                       decoder, sched, t, eps)
    else:
        raise ShapeError(f"unknown probe mode {mode!r}")

    order = list(zip([p for _, p in prod_a.named_params()],
                     [p for _, p in prod_b.named_params()]))
    full_losses, sds_losses, cosines = [], [], []
    noise_rng = spawn_rng(seed, "probe-noise")
    t_fixed, eps_fixed = draw_step_noise(batch, shape, sched, noise_rng,
                                         dtype=dtype)
    for _ in range(steps):
        la, ga, _ = full_run(t_fixed, eps_fixed)
        lb, gb, _ = sds_run(t_fixed, eps_fixed)
        full_losses.append(la)
        sds_losses.append(lb)
        cosines.append(_cosine(ga, gb, order))
        for pa, pb in order:
            pa.assign_(pa.data - lr * ga[pa].data)
            pb.assign_(pb.data - lr * gb[pb].data)

    gap = max((float(np.abs(pa.data - pb.data).max()) for pa, pb in order),
              default=0.0)
    return ProbeReport(full_losses=full_losses, sds_losses=sds_losses,
                       update_cosines=cosines, final_param_gap=gap)
