"""User-facing prompt lines with inline image references."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

CAPTION_GUIDANCE = 3.0
SUBJECT_GUIDANCE = 7.5

_TAG = re.compile(r"^\{img:([^{}]+)\}$")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    """An ordered mix of words and image file references plus sampling
    settings. Prompts with image references default to the stronger
    subject-driven guidance scale."""

    items: tuple[tuple[str, str], ...]
    guidance: float
    sampler: str = "ddim"
    steps: int = 50
    seed: int = 0

    @property
    def image_paths(self) -> list[str]:
        return [v for k, v in self.items if k == "image"]

    @property
    def text(self) -> str:
        return " ".join(v for k, v in self.items if k == "text")


def parse_prompt(line: str, base_dir: str = ".",
                 guidance: float | None = None, sampler: str = "ddim",
                 steps: int = 50, seed: int = 0) -> PromptSpec:
    items: list[tuple[str, str]] = []
    for token in line.split():
        if token.startswith("{") or token.endswith("}"):
            m = _TAG.match(token)
            if not m:
                raise PromptError(f"malformed image tag {token!r}")
            path = os.path.join(base_dir, m.group(1))
            if not os.path.isfile(path):
                raise PromptError(f"missing file {path!r}")
            items.append(("image", path))
        else:
            items.append(("text", token))
    if not items:
        raise PromptError("empty prompt")
    if guidance is None:
        has_img = any(k == "image" for k, _ in items)
        guidance = SUBJECT_GUIDANCE if has_img else CAPTION_GUIDANCE
    if guidance < 0:
        raise PromptError("guidance must be >= 0")
    return PromptSpec(items=tuple(items), guidance=float(guidance),
                      sampler=sampler, steps=int(steps), seed=int(seed))
