"""Staged training: module construction, freeze tables, loops, checkpoints.

Stages form a linear chain (0a -> 0b -> 0c -> 1 -> 2 -> 3); each one loads
its prerequisites' checkpoints, trains one or two module groups, and writes
stage-<name>.ckpt plus metrics-<name>.jsonl into the working directory.
Everything downstream of the config seed is deterministic, so rerunning a
stage into a fresh directory reproduces the checkpoint byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import datagen
from ..alignernet import RECONSTRUCTION_WEIGHT, Aligner
from ..anchor import Anchor, contrastive_loss
from ..diffusion import (NoiseSchedule, UNet, Vae, apply_null_dropout,
                         build_schedule, diffusion_loss, sample)
from ..distill import (build_instruct_batch, check_digests,
                       instruct_grad_full, snapshot_digests)
from ..mllm import Mllm, Vocab, tokenize_interleaved
from ..numerics import NonFiniteError, Tape, Tensor, backward, no_tape, ops, spawn_rng
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .metrics import MetricsWriter
from .optim import AdamW, lr_at
from .ppm import read_ppm, write_ppm, write_sidecar
from .prompts import PromptSpec


class StageError(RuntimeError):
    """Missing prerequisite, bad stage name, or unusable artifact."""


class NumericalAbort(RuntimeError):
    """A loss or gradient went non-finite; training stopped mid-stage."""


STAGE_ORDER = ("0a", "0b", "0c", "1", "2", "3")

# Condition rows are swapped for the learned null matrix at this rate while
# the denoiser trains, so classifier-free guidance has an unconditional mode.
NULL_DROPOUT_P = 0.1

# Entity footprints cover only a few percent of the canvas; without this
# boost the codec happily blurs them into the background while the mean
# squared error still looks excellent.
VAE_FOREGROUND_WEIGHT = 25.0

# Which checkpoints may provide each module at load time, newest stage first.
_PROVIDERS = {
    "anchor": ("0a",),
    "vae": ("0b",),
    "unet": ("0c",),
    "mllm": ("3", "1"),
    "aligner": ("3", "2"),
}


def checkpoint_path(workdir, stage: str) -> Path:
    return Path(workdir) / f"stage-{stage}.ckpt"


def metrics_path(workdir, stage: str) -> Path:
    return Path(workdir) / f"metrics-{stage}.jsonl"


# -- module construction from saved state ------------------------------------
#
# Checkpoints carry only named arrays, so each builder recovers the structural
# hyperparameters from tensor shapes (widths from conv kernels, depth from
# block-index prefixes). Head counts are not recoverable from shapes; the
# builders assume the defaults, which the configs here never override.

def _block_depth(states: dict, prefix: str) -> int:
    idx = {int(k[len(prefix):].split(".", 1)[0])
           for k in states if k.startswith(prefix)}
    if not idx:
        raise StageError(f"no tensors under {prefix!r}")
    return max(idx) + 1


def _build_anchor(states: dict) -> Anchor:
    m = Anchor(states["tok.table"].shape[0], spawn_rng(0, "build"))
    m.load_state_(states)
    return m


def _build_vae(states: dict) -> Vae:
    m = Vae(spawn_rng(0, "build"), width=states["enc1.w"].shape[0])
    m.load_state_(states)
    return m


def _build_unet(states: dict) -> UNet:
    m = UNet(spawn_rng(0, "build"), width=states["conv_in.w"].shape[0],
             T=states["time_table"].shape[0] - 1)
    m.load_state_(states)
    return m


def _build_mllm(states: dict) -> Mllm:
    m = Mllm(Vocab(), spawn_rng(0, "build"),
             d=states["tok_embed.table"].shape[1],
             layers=_block_depth(states, "blocks."))
    m.load_state_(states)
    return m


def _build_aligner(states: dict) -> Aligner:
    m = Aligner(spawn_rng(0, "build"),
                depth=_block_depth(states, "to_condition.enc_blocks."))
    m.load_state_(states)
    return m


_BUILDERS = {"anchor": _build_anchor, "vae": _build_vae, "unet": _build_unet,
             "mllm": _build_mllm, "aligner": _build_aligner}


def _module_states(ckpt_tensors: dict, name: str) -> dict:
    prefix = name + "."
    out = {k[len(prefix):]: v for k, v in ckpt_tensors.items()
           if k.startswith(prefix)}
    if not out:
        raise StageError(f"checkpoint holds no tensors for module {name!r}")
    return out


def load_module(workdir, name: str, stage: str | None = None):
    """Rebuild one trained module from a stage checkpoint.

    With stage=None the newest provider present in workdir wins (so sampling
    picks up instruction-tuned weights once stage 3 exists).
    """
    candidates = (stage,) if stage is not None else _PROVIDERS[name]
    for cand in candidates:
        path = checkpoint_path(workdir, cand)
        if path.exists():
            header, tensors = load_checkpoint(path)
            return _BUILDERS[name](_module_states(tensors, name))
    raise StageError(f"no checkpoint provides {name!r}; looked for stages "
                     f"{', '.join(candidates)} in {workdir}")


def _save_stage(workdir, config: TrainConfig, modules: dict) -> Path:
    tensors = {}
    for name, module in modules.items():
        for pname, arr in module.state().items():
            tensors[f"{name}.{pname}"] = arr
    path = checkpoint_path(workdir, config.stage)
    save_checkpoint(path, config.stage, config.steps, config.digest(), tensors)
    return path


# -- shared loop helpers -----------------------------------------------------

def _scene_batch(config: TrainConfig, stage: str, step: int):
    """One deterministic batch of (spec, render, per-sample rng).

    Each sample owns a seed derived from (seed, stage, step, index), so the
    stream does not depend on batch assembly order.
    """
    out = []
    for i in range(config.batch_size):
        r = spawn_rng(config.seed, f"{stage}:{step}:{i}")
        spec, render = datagen.gen_scene(r)
        out.append((spec, render, r))
    return out


def _should_log(config: TrainConfig, step: int) -> bool:
    return step == 0 or (step + 1) % config.log_every == 0 \
        or step == config.steps - 1


def _train(config: TrainConfig, metrics: MetricsWriter, params,
           step_fn, weight_decay: float | None = None) -> None:
    """Run the optimizer loop; step_fn(step) -> (metric dict, grads)."""
    wd = config.weight_decay if weight_decay is None else weight_decay
    opt = AdamW(params, weight_decay=wd)
    for step in range(config.steps):
        lr = lr_at(step, config.learning_rate, config.warmup_steps,
                   config.steps)
        terms, grads = step_fn(step)
        opt.step(grads, lr)
        if _should_log(config, step):
            metrics.log(step=step, lr=lr, **terms)


def _mix_plan(n: int, weights, rng) -> list[str]:
    """Sample kinds for one batch, apportioned by weights exactly
    (largest-remainder rounding), order shuffled."""
    names = ("constructed", "edit", "caption")
    total = sum(weights)
    quotas = [n * w / total for w in weights]
    counts = [int(q) for q in quotas]
    order = sorted(range(3), key=lambda i: quotas[i] - counts[i], reverse=True)
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    kinds = [names[i] for i in range(3) for _ in range(counts[i])]
    rng.shuffle(kinds)
    return kinds


# -- per-stage trainers ------------------------------------------------------

def _stage_0a(config, workdir, metrics):
    vocab = Vocab()
    anchor = Anchor(len(vocab), spawn_rng(config.seed, "init:anchor"))
    params = [p for _, p in anchor.named_params()]

    def step_fn(step):
        batch = _scene_batch(config, "0a", step)
        imgs = np.stack([r for _, r, _ in batch])
        ids = [vocab.encode_words(datagen.caption_scene(spec))
               for spec, _, _ in batch]
        with Tape() as tape:
            _, img_pool = anchor.encode_image_batch(Tensor(imgs, _check=False))
            txt_pool = anchor.pooled_text_batch(ids)
            loss = contrastive_loss(img_pool, txt_pool, anchor.temperature)
            grads = backward(loss, tape, params)
        return {"loss": float(loss.data)}, grads

    _train(config, metrics, params, step_fn)
    return {"anchor": anchor}


def _stage_0b(config, workdir, metrics):
    vae = Vae(spawn_rng(config.seed, "init:vae"), width=config.vae_width)
    # latent_scale is calibrated once after training, not optimized
    params = [p for name, p in vae.named_params() if name != "latent_scale"]

    def step_fn(step):
        batch = _scene_batch(config, "0b", step)
        imgs = np.stack([r for _, r, _ in batch])
        wts = np.ones_like(imgs)
        for k, (spec, _, _) in enumerate(batch):
            for e in spec.entities:
                m = datagen.footprint_mask(e.shape, e.center, e.size)
                wts[k][:, m] = VAE_FOREGROUND_WEIGHT
        wts /= wts.mean()
        with Tape() as tape:
            loss = vae.reconstruction_loss(Tensor(imgs, _check=False),
                                           weights=Tensor(wts, _check=False))
            grads = backward(loss, tape, params)
        return {"loss": float(loss.data)}, grads

    _train(config, metrics, params, step_fn)
    calib = np.stack([datagen.gen_scene(spawn_rng(config.seed,
                                                  f"0b:calib:{i}"))[1]
                      for i in range(256)])
    with no_tape():
        scale = vae.calibrate_scale_(Tensor(calib, _check=False))
    metrics.log(step=config.steps, event="calibrated", latent_scale=scale)
    return {"vae": vae}


def _stage_0c(config, workdir, metrics):
    vocab = Vocab()
    anchor = load_module(workdir, "anchor", "0a")
    vae = load_module(workdir, "vae", "0b")
    frozen = snapshot_digests({"anchor": anchor, "vae": vae})
    unet = UNet(spawn_rng(config.seed, "init:unet"), width=config.unet_width)
    params = [p for _, p in unet.named_params()]
    sched = build_schedule()
    noise_rng = spawn_rng(config.seed, "0c:noise")
    null_rng = spawn_rng(config.seed, "0c:null")

    def step_fn(step):
        batch = _scene_batch(config, "0c", step)
        imgs = np.stack([r for _, r, _ in batch])
        ids = [vocab.encode_words(datagen.caption_scene(spec))
               for spec, _, _ in batch]
        with no_tape():
            cond = anchor.encode_text_batch(ids)
            z0 = vae.encode(Tensor(imgs, _check=False))
        with Tape() as tape:
            cond_t = apply_null_dropout(Tensor(cond.data, _check=False),
                                        unet.null_cond, NULL_DROPOUT_P,
                                        null_rng)
            loss = diffusion_loss(Tensor(z0.data, _check=False), cond_t,
                                  unet, sched, rng=noise_rng)
            grads = backward(loss, tape, params)
        return {"loss": float(loss.data)}, grads

    _train(config, metrics, params, step_fn)
    check_digests({"anchor": anchor, "vae": vae}, frozen)
    return {"unet": unet}


def _stage_1(config, workdir, metrics):
    vocab = Vocab()
    anchor = load_module(workdir, "anchor", "0a")
    frozen = snapshot_digests({"anchor": anchor})
    mllm = Mllm(vocab, spawn_rng(config.seed, "init:mllm"),
                layers=config.mllm_layers)
    params = [p for _, p in mllm.named_params()]
    drop_rng = spawn_rng(config.seed, "1:dropout")

    def step_fn(step):
        seqs = []
        # alternate plain captions and interleaved constructed prompts so the
        # model learns both pure-text and image-slot contexts
        for i, (spec, render, r) in enumerate(_scene_batch(config, "1", step)):
            if i % 2 == 0:
                s = datagen.make_caption_sample(spec, render)
            else:
                s = datagen.make_constructed_sample(spec, render, r)
            seqs.append(tokenize_interleaved(s.items, vocab, anchor))
        with Tape() as tape:
            loss = mllm.lm_loss_batch(seqs, dropout_p=config.dropout,
                                      rng=drop_rng)
            grads = backward(loss, tape, params)
        return {"loss": float(loss.data)}, grads

    _train(config, metrics, params, step_fn)
    check_digests({"anchor": anchor}, frozen)
    return {"mllm": mllm}


def _stage_2(config, workdir, metrics):
    vocab = Vocab()
    anchor = load_module(workdir, "anchor", "0a")
    mllm = load_module(workdir, "mllm", "1")
    frozen = snapshot_digests({"anchor": anchor, "mllm": mllm})
    aligner = Aligner(spawn_rng(config.seed, "init:aligner"),
                      depth=config.aligner_depth)
    params = [p for _, p in aligner.named_params()]

    def step_fn(step):
        pairs = []
        with no_tape():
            for spec, render, _ in _scene_batch(config, "2", step):
                words = datagen.caption_scene(spec)
                target = anchor.encode_text_target(vocab.encode_words(words))
                seq = tokenize_interleaved([("text", w) for w in words],
                                           vocab, anchor)
                _, source = mllm.forward(seq)
                pairs.append((source.data, target.data))
        with Tape() as tape:
            aligns, recons = [], []
            for src, tgt in pairs:
                a, r = aligner.losses(Tensor(src, _check=False),
                                      Tensor(tgt, _check=False))
                aligns.append(a)
                recons.append(r)
            align = ops.mean(ops.stack(aligns))
            recon = ops.mean(ops.stack(recons))
            loss = ops.add(align, ops.scale(recon, RECONSTRUCTION_WEIGHT))
            grads = backward(loss, tape, params)
        return {"loss": float(loss.data), "align": float(align.data),
                "recon": float(recon.data)}, grads

    _train(config, metrics, params, step_fn)
    check_digests({"anchor": anchor, "mllm": mllm}, frozen)
    return {"aligner": aligner}


def _stage_3(config, workdir, metrics):
    vocab = Vocab()
    anchor = load_module(workdir, "anchor", "0a")
    vae = load_module(workdir, "vae", "0b")
    unet = load_module(workdir, "unet", "0c")
    mllm = load_module(workdir, "mllm", "1")
    aligner = load_module(workdir, "aligner", "2")
    frozen = snapshot_digests({"anchor": anchor, "vae": vae, "unet": unet})
    params = [p for _, p in mllm.named_params()] \
        + [p for _, p in aligner.named_params()]
    sched = build_schedule()
    noise_rng = spawn_rng(config.seed, "3:noise")
    mix_rng = spawn_rng(config.seed, "3:mix")

    def step_fn(step):
        kinds = _mix_plan(config.batch_size, config.mix, mix_rng)
        samples = []
        for i, kind in enumerate(kinds):
            r = spawn_rng(config.seed, f"3:{step}:{i}")
            spec, render = datagen.gen_scene(r)
            if kind == "constructed":
                samples.append(datagen.make_constructed_sample(spec, render, r))
            elif kind == "edit":
                samples.append(datagen.make_edit_sample(spec, render, r))
            else:
                samples.append(datagen.make_caption_sample(spec, render))
        with no_tape():
            batch = build_instruct_batch(samples, vocab, anchor)
        loss, grads = instruct_grad_full(batch, mllm, aligner, unet, vae,
                                         sched, rng=noise_rng)
        return {"loss": float(loss)}, grads

    _train(config, metrics, params, step_fn)
    check_digests({"anchor": anchor, "vae": vae, "unet": unet}, frozen)
    return {"mllm": mllm, "aligner": aligner}


_TRAINERS = {"0a": _stage_0a, "0b": _stage_0b, "0c": _stage_0c,
             "1": _stage_1, "2": _stage_2, "3": _stage_3}


def run_stage(config: TrainConfig, workdir) -> Path:
    """Train one stage end to end and write its checkpoint.

    Raises StageError when a prerequisite checkpoint is missing and
    NumericalAbort when the loss goes non-finite (after recording a
    diagnostic metrics line).
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    idx = STAGE_ORDER.index(config.stage)
    for prereq in STAGE_ORDER[:idx]:
        if not checkpoint_path(workdir, prereq).exists():
            raise StageError(f"stage {config.stage} needs stage {prereq} "
                             f"checkpoint first")
    metrics = MetricsWriter(metrics_path(workdir, config.stage), config.stage)
    try:
        modules = _TRAINERS[config.stage](config, workdir, metrics)
    except NonFiniteError as e:
        metrics.log(step=-1, event="nan_abort", detail=str(e))
        metrics.close()
        raise NumericalAbort(f"stage {config.stage}: {e}") from e
    metrics.close()
    return _save_stage(workdir, config, modules)


# -- inference ---------------------------------------------------------------

def _resolve_items(prompt: PromptSpec):
    items = []
    for kind, value in prompt.items:
        if kind == "image":
            items.append(("image", read_ppm(value)))
        else:
            items.append((kind, value))
    return items


def build_condition(prompt: PromptSpec, vocab, anchor, mllm=None,
                    aligner=None, condition_source: str = "aligner") -> Tensor:
    """Condition matrix for sampling: either the caption path straight
    through the frozen text anchor, or the full perception path (language
    model source embeddings mapped by the aligner)."""
    with no_tape():
        if condition_source == "anchor":
            if prompt.image_paths:
                raise StageError("anchor conditioning accepts text only")
            words = [v for k, v in prompt.items if k == "text"]
            return anchor.encode_text_target(vocab.encode_words(words))
        if condition_source != "aligner":
            raise StageError(f"unknown condition source {condition_source!r}")
        if mllm is None or aligner is None:
            raise StageError("aligner conditioning needs mllm and aligner")
        seq = tokenize_interleaved(_resolve_items(prompt), vocab, anchor)
        _, source = mllm.forward(seq)
        return aligner.encode(source)


def sample_to_file(prompt: PromptSpec, workdir, out_path,
                   condition_source: str = "aligner") -> Path:
    """Run the full sampling path for one prompt and write a PPM image
    plus its seed sidecar."""
    workdir = Path(workdir)
    vocab = Vocab()
    anchor = load_module(workdir, "anchor", "0a")
    vae = load_module(workdir, "vae", "0b")
    unet = load_module(workdir, "unet", "0c")
    mllm = aligner = None
    if condition_source == "aligner":
        mllm = load_module(workdir, "mllm")
        aligner = load_module(workdir, "aligner")
    cond = build_condition(prompt, vocab, anchor, mllm, aligner,
                           condition_source)
    sched = build_schedule()
    with no_tape():
        z = sample(cond, prompt.sampler, prompt.steps, prompt.guidance,
                   unet, sched, spawn_rng(prompt.seed, "sample"),
                   null_cond=unet.null_cond)
        img = vae.decode(ops.reshape(z, (1,) + z.shape))
    arr = np.clip(img.data[0], 0.0, 1.0)
    out_path = Path(out_path)
    write_ppm(out_path, arr)
    write_sidecar(out_path, prompt.seed)
    return out_path


def generate_dataset(n: int, seed: int, out_dir) -> Path:
    """Write n rendered scenes as PPM files plus a manifest.jsonl with the
    caption and per-sample seed for each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for i in range(n):
            sample_seed = f"sample:{i}"
            spec, render = datagen.gen_scene(spawn_rng(seed, sample_seed))
            name = f"scene-{i:05d}.ppm"
            write_ppm(out_dir / name, render)
            row = {"index": i, "file": name, "seed": seed, "tag": sample_seed,
                   "caption": " ".join(datagen.caption_scene(spec))}
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest
