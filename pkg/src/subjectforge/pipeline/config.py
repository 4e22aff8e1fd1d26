"""Line-based key = value training configuration.

The format is deliberately tiny: one assignment per line, `#` starts a
comment, unknown keys are hard errors so typos cannot silently fall back to
defaults. A config plus a seed fully determines a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

STAGES = ("0a", "0b", "0c", "1", "2", "3")

DEFAULT_STEPS = {"0a": 2000, "0b": 2000, "0c": 10000,
                 "1": 5000, "2": 5000, "3": 10000}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    steps: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = -1            # -1 means 3% of steps
    weight_decay: float = 0.01
    dropout: float = 0.1
    seed: int = 0
    mix: tuple[int, int, int] = (2, 2, 1)
    guidance: float = 3.0
    sampler: str = "ddim"
    sample_steps: int = 50
    log_every: int = 50
    unet_width: int = 64
    vae_width: int = 32
    mllm_layers: int = 4
    aligner_depth: int = 2
    condition_source: str = "aligner"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.warmup_steps == -1:
            object.__setattr__(self, "warmup_steps",
                               max(1, int(round(0.03 * self.steps))))
        if self.warmup_steps > max(self.steps, 1):
            raise ConfigError("warmup_steps must not exceed steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if len(self.mix) != 3 or any(w < 0 for w in self.mix) \
                or sum(self.mix) == 0:
            raise ConfigError("mix needs three non-negative weights")
        if self.guidance < 0:
            raise ConfigError("guidance must be >= 0")
        if self.sampler not in ("ddim", "ddpm"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.condition_source not in ("aligner", "anchor"):
            raise ConfigError("condition_source must be aligner or anchor")

    def canonical(self) -> str:
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if f.name == "mix":
                v = ":".join(str(w) for w in v)
            parts.append(f"{f.name}={v}")
        return "\n".join(parts) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()


_INT_KEYS = {"steps", "batch_size", "warmup_steps", "seed", "log_every",
             "sample_steps", "unet_width", "vae_width", "mllm_layers",
             "aligner_depth"}
_FLOAT_KEYS = {"learning_rate", "weight_decay", "dropout", "guidance"}
_STR_KEYS = {"stage", "sampler", "condition_source"}


def parse_config(text: str) -> TrainConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _INT_KEYS:
            values[key] = int(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        elif key in _STR_KEYS:
            values[key] = val
        elif key == "mix":
            try:
                parts = tuple(int(p) for p in val.split(":"))
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad mix {val!r}") from e
            values[key] = parts
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    if "stage" not in values:
        raise ConfigError("config must set stage")
    if values["stage"] not in DEFAULT_STEPS:
        raise ConfigError(f"unknown stage {values['stage']!r}")
    if "steps" not in values:
        values["steps"] = DEFAULT_STEPS[values["stage"]]
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
