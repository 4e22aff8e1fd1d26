"""Command-line front end: train stages, sample images, generate data,
run evaluations, self-check gradients.

Exit codes: 0 success, 2 usage error, 3 bad input or missing artifact,
4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .. import datagen
from ..mllm import Vocab
from ..numerics import ShapeError, Tensor, no_tape, spawn_rng
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .evaluate import retrieval_top1, score_fidelity
from .metrics import read_metrics
from .ppm import PpmError, read_ppm
from .prompts import PromptError, parse_prompt
from .stages import (NumericalAbort, StageError, generate_dataset,
                     load_module, run_stage, sample_to_file)

EXIT_OK = 0
EXIT_DATA = 3
EXIT_NUMERIC = 4

SEED_ENV = "SUBJECTFORGE_SEED"


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from e


def _cmd_train(args) -> int:
    config = load_config(args.config)
    seed = _env_seed()
    if args.seed is not None:
        seed = args.seed
    if seed is not None and seed != config.seed:
        config = dataclasses.replace(config, seed=seed)
    path = run_stage(config, args.workdir)
    rows = read_metrics(path.parent / f"metrics-{config.stage}.jsonl")
    last = rows[-1] if rows else {}
    print(f"stage {config.stage}: {config.steps} steps -> {path}")
    if "loss" in last:
        print(f"final loss {last['loss']:.6f}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    prompt = parse_prompt(args.prompt, base_dir=args.base_dir,
                          guidance=args.guidance, sampler=args.sampler,
                          steps=args.steps, seed=seed)
    out = sample_to_file(prompt, args.workdir, args.out,
                         condition_source=args.source)
    print(f"wrote {out} (guidance {prompt.guidance}, sampler "
          f"{prompt.sampler}, seed {prompt.seed})")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    manifest = generate_dataset(args.count, seed, args.out)
    print(f"wrote {args.count} scenes under {args.out} "
          f"(manifest {manifest.name})")
    return EXIT_OK


def _eval_scenes(n: int, seed: int):
    specs, renders = [], []
    for i in range(n):
        spec, render = datagen.gen_scene(spawn_rng(seed, f"eval:{i}"))
        specs.append(spec)
        renders.append(render)
    return specs, np.stack(renders)


def _cmd_eval(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    specs, renders = _eval_scenes(args.n, seed)
    if args.what == "vae":
        vae = load_module(args.workdir, "vae", "0b")
        with no_tape():
            recon = vae.decode(vae.encode(Tensor(renders, _check=False)))
        mae = float(np.abs(recon.data - renders).mean())
        print(f"vae reconstruction mae over {args.n} scenes: {mae:.5f}")
    elif args.what == "retrieval":
        anchor = load_module(args.workdir, "anchor", "0a")
        vocab = Vocab()
        captions = [datagen.caption_scene(s) for s in specs]
        acc = retrieval_top1(renders, captions, vocab, anchor)
        print(f"caption->image top-1 retrieval over {args.n}: {acc:.4f}")
    elif args.what == "fidelity":
        # render-level oracle on the generator's own training distribution:
        # sample each caption, score the result against the scene layout
        total = 0.0
        for i, spec in enumerate(specs):
            words = datagen.caption_scene(spec)
            prompt = parse_prompt(" ".join(words), steps=args.steps,
                                  seed=seed + i)
            tmp = os.path.join(args.workdir, f"eval-sample-{i}.ppm")
            sample_to_file(prompt, args.workdir, tmp,
                           condition_source=args.source)
            img = read_ppm(tmp)
            ents = [(e.shape, e.color, e.size) for e in spec.entities]
            total += score_fidelity(img, ents)
        print(f"mean fidelity over {args.n} sampled scenes: "
              f"{total / args.n:.4f}")
    else:
        raise ConfigError(f"unknown eval target {args.what!r}")
    return EXIT_OK


def _cmd_check_grad(args) -> int:
    from ..numerics import finite_diff_check, nn, ops

    rng = spawn_rng(args.seed or 0, "check-grad")
    lin1 = nn.Linear(6, 5, rng)
    lin2 = nn.Linear(5, 3, rng)
    for m in (lin1, lin2):
        m.convert_(np.float64)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def loss_fn():
        h = ops.gelu(lin1(x))
        return ops.mean(ops.mul(lin2(h), lin2(h)))

    params = [x] + [p for _, p in lin1.named_params()] \
        + [p for _, p in lin2.named_params()]
    report = finite_diff_check(loss_fn, params, max_entries=8)
    print(str(report))
    if not report.ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="subjectforge",
        description="Desk-scale subject-driven image generation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True, help="key=value config file")
    t.add_argument("--workdir", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    t.set_defaults(fn=_cmd_train)

    s = sub.add_parser("sample", help="generate one image from a prompt")
    s.add_argument("--workdir", required=True)
    s.add_argument("--out", required=True, help="output PPM path")
    s.add_argument("--prompt", required=True,
                   help="words and {img:path} references")
    s.add_argument("--source", choices=("aligner", "anchor"),
                   default="aligner", help="conditioning path")
    s.add_argument("--guidance", type=float, default=None)
    s.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--base-dir", default=".",
                   help="directory image references resolve against")
    s.set_defaults(fn=_cmd_sample)

    g = sub.add_parser("gen-data", help="write rendered scenes to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=_cmd_gen_data)

    e = sub.add_parser("eval", help="run one evaluation metric")
    e.add_argument("--workdir", required=True)
    e.add_argument("what", choices=("vae", "retrieval", "fidelity"))
    e.add_argument("--n", type=int, default=64)
    e.add_argument("--steps", type=int, default=50,
                   help="sampler steps for fidelity eval")
    e.add_argument("--source", choices=("aligner", "anchor"),
                   default="aligner")
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("check-grad",
                       help="finite-difference self-check of the autodiff")
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(fn=_cmd_check_grad)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, StageError, PromptError, PpmError, CheckpointError,
            ShapeError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
