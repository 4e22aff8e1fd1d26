"""Synthetic shape world: scenes, renders, captions, entity segmentation.

Scenes hold 1-3 flat-colored shapes on a flat background, rasterized onto a
32x32 canvas. Because rendering, captioning, extraction, and segmentation
are all exact functions of the scene, the whole captioning/segmentation
pipeline is an oracle: every downstream score can be checked against ground
truth, with no model-based stage in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CANVAS = 32

# palette = the 8 corners of the RGB cube, keyed by name
PALETTE: dict[str, tuple[float, float, float]] = {
    "black": (0.0, 0.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}
COLOR_NAMES = tuple(PALETTE)
SHAPES = ("circle", "square", "triangle")

# masked-out pixels get a value outside the palette so they can never be
# mistaken for scene content
NEUTRAL_GRAY = 0.5

# combinations held out of every training stage; stage-3 evaluation uses
# them as genuinely novel subjects
RESERVED_COMBOS = (
    ("yellow", "circle"),
    ("cyan", "square"),
    ("magenta", "triangle"),
)

POSITION_WORDS = ("top", "bottom", "left", "right")
GRAMMAR_WORDS = COLOR_NAMES + SHAPES + POSITION_WORDS + (
    "a", "and", "on", "background", "the", "to",
    "recolor", "move", "change",
)

MIN_SIZE = 3
MAX_SIZE = 5


@dataclass(frozen=True)
class EntitySpec:
    shape: str
    color: str
    center: tuple[int, int]   # (row, col)
    size: int

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    background: str
    entities: tuple[EntitySpec, ...]


class GrammarError(ValueError):
    """Caption text falls outside the scene grammar."""


# -- geometry ----------------------------------------------------------------

def footprint_mask(shape: str, center: tuple[int, int], size: int) -> np.ndarray:
    """Boolean 32x32 mask of the shape's exact pixel footprint.

    square of size k covers k*k pixels; triangle of size k covers
    1+3+...+(2k-1) = k*k pixels; circle of radius k covers the discrete disc.
    """
    r0, c0 = center
    rr, cc = np.mgrid[0:CANVAS, 0:CANVAS]
    if shape == "circle":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= size ** 2
    if shape == "square":
        top, left = r0 - size // 2, c0 - size // 2
        return ((rr >= top) & (rr < top + size)
                & (cc >= left) & (cc < left + size))
    if shape == "triangle":
        top = r0 - size // 2
        i = rr - top
        return (i >= 0) & (i < size) & (np.abs(cc - c0) <= i)
    raise GrammarError(f"unknown shape {shape!r}")


def _bbox(e: EntitySpec) -> tuple[int, int, int, int]:
    r, c = e.center
    s = e.size
    if e.shape == "circle":
        return r - s, r + s, c - s, c + s
    if e.shape == "square":
        return r - s // 2, r - s // 2 + s - 1, c - s // 2, c - s // 2 + s - 1
    return r - s // 2, r - s // 2 + s - 1, c - s, c + s


def _bbox_ok(e: EntitySpec, placed: list[EntitySpec]) -> bool:
    r0, r1, c0, c1 = _bbox(e)
    if r0 < 1 or c0 < 1 or r1 > CANVAS - 2 or c1 > CANVAS - 2:
        return False
    for other in placed:
        q0, q1, p0, p1 = _bbox(other)
        if r0 <= q1 + 1 and q0 <= r1 + 1 and c0 <= p1 + 1 and p0 <= c1 + 1:
            return False
    return True


def render_scene(spec: SceneSpec) -> np.ndarray:
    img = np.empty((3, CANVAS, CANVAS), dtype=np.float32)
    img[:] = np.asarray(PALETTE[spec.background], dtype=np.float32)[:, None, None]
    for e in spec.entities:
        mask = footprint_mask(e.shape, e.center, e.size)
        color = np.asarray(PALETTE[e.color], dtype=np.float32)
        img[:, mask] = color[:, None]
    return img


# -- scene generation --------------------------------------------------------

def gen_scene(rng: np.random.Generator,
              allow_reserved: bool = False,
              n_entities: int | None = None) -> tuple[SceneSpec, np.ndarray]:
    """Sample a valid scene and its render. Placement rejection-samples until
    bounding boxes are disjoint; entity colors are pairwise distinct and
    differ from the background, so captions name entities unambiguously."""
    while True:
        n = int(n_entities) if n_entities else int(rng.integers(1, 4))
        background = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
        entities: list[EntitySpec] = []
        used_colors = {background}
        ok = True
        for _ in range(n):
            entity = _place_entity(rng, used_colors, entities, allow_reserved)
            if entity is None:
                ok = False
                break
            entities.append(entity)
            used_colors.add(entity.color)
        if ok:
            spec = SceneSpec(background=background, entities=tuple(entities))
            return spec, render_scene(spec)


def _place_entity(rng: np.random.Generator, used_colors: set[str],
                  placed: list[EntitySpec],
                  allow_reserved: bool) -> EntitySpec | None:
    colors = [c for c in COLOR_NAMES if c not in used_colors]
    for _ in range(64):
        color = colors[rng.integers(len(colors))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        if not allow_reserved and (color, shape) in RESERVED_COMBOS:
            continue
        size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
        # coarse placement grid keeps the position space small
        r = int(rng.integers(3, 15)) * 2
        c = int(rng.integers(3, 15)) * 2
        e = EntitySpec(shape=shape, color=color, center=(r, c), size=size)
        if _bbox_ok(e, placed):
            return e
    return None


# -- captions ----------------------------------------------------------------

def caption_scene(spec: SceneSpec) -> list[str]:
    words: list[str] = []
    for i, e in enumerate(spec.entities):
        if i > 0:
            words.append("and")
        words += ["a", e.color, e.shape]
    words += ["on", spec.background, "background"]
    return words


def extract_entities(words: list[str]) -> list[str]:
    """Parse a grammar caption back into its ordered entity phrases."""
    tokens = list(words)
    if len(tokens) < 3 or tokens[-1] != "background" or tokens[-3] != "on":
        raise GrammarError(f"caption tail malformed: {words}")
    if tokens[-2] not in COLOR_NAMES:
        raise GrammarError(f"unknown background color {tokens[-2]!r}")
    body = tokens[:-3]
    phrases: list[str] = []
    i = 0
    while i < len(body):
        if phrases:
            if body[i] != "and":
                raise GrammarError(f"expected 'and' at {i} in {words}")
            i += 1
        if i + 3 > len(body) or body[i] != "a":
            raise GrammarError(f"expected 'a <color> <shape>' at {i} in {words}")
        color, shape = body[i + 1], body[i + 2]
        if color not in COLOR_NAMES or shape not in SHAPES:
            raise GrammarError(f"unknown phrase {color!r} {shape!r}")
        phrases.append(f"{color} {shape}")
        i += 3
    if not phrases:
        raise GrammarError(f"caption names no entities: {words}")
    return phrases


# -- segmentation ------------------------------------------------------------

def segment_entity(render: np.ndarray, spec: SceneSpec, phrase: str,
                   keep_background: bool = False
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Cut one entity out of a render.

    Returns (entity image, mask). Other entities are always grayed out;
    background pixels stay only when keep_background is set.
    """
    matches = [e for e in spec.entities if e.phrase == phrase]
    if not matches:
        raise GrammarError(f"phrase {phrase!r} not in scene")
    target = matches[0]
    mask = footprint_mask(target.shape, target.center, target.size)
    out = np.full_like(render, NEUTRAL_GRAY)
    if keep_background:
        out[:] = np.asarray(PALETTE[spec.background],
                            dtype=np.float32)[:, None, None]
    out[:, mask] = render[:, mask]
    return out, mask


# -- instruction samples -----------------------------------------------------
# Sequence items at the prompt level: ("text", word) or ("image", 3x32x32
# array). The multimodal tokenizer turns these into embedded sequences.

PromptItem = tuple[str, object]


@dataclass(frozen=True)
class ConstructedSample:
    """Caption with per-entity segment images spliced in after each phrase."""
    items: tuple[PromptItem, ...]
    target: np.ndarray
    text_dropped: tuple[bool, ...]
    background_kept: bool
    spec: SceneSpec


@dataclass(frozen=True)
class EditSample:
    """Caption + original render + an edit instruction; target is the edit."""
    items: tuple[PromptItem, ...]
    target: np.ndarray
    edit: str
    spec: SceneSpec
    edited_spec: SceneSpec


@dataclass(frozen=True)
class CaptionSample:
    """Plain text-to-image pair."""
    items: tuple[PromptItem, ...]
    target: np.ndarray
    spec: SceneSpec


def _text(words) -> list[PromptItem]:
    return [("text", w) for w in words]


def make_constructed_sample(spec: SceneSpec, render: np.ndarray,
                            rng: np.random.Generator) -> ConstructedSample:
    """Entity phrases each followed by their segment image; each phrase is
    dropped w.p. 0.5 independently, segments keep the scene background w.p.
    0.5 for the whole sample."""
    keep_bg = bool(rng.random() < 0.5)
    dropped = tuple(bool(rng.random() < 0.5) for _ in spec.entities)
    items: list[PromptItem] = []
    for i, e in enumerate(spec.entities):
        if i > 0:
            items.append(("text", "and"))
        if not dropped[i]:
            items += _text(["a", e.color, e.shape])
        seg, _ = segment_entity(render, spec, e.phrase, keep_background=keep_bg)
        items.append(("image", seg))
    items += _text(["on", spec.background, "background"])
    return ConstructedSample(items=tuple(items), target=render,
                             text_dropped=dropped, background_kept=keep_bg,
                             spec=spec)


def make_caption_sample(spec: SceneSpec, render: np.ndarray) -> CaptionSample:
    return CaptionSample(items=tuple(_text(caption_scene(spec))),
                         target=render, spec=spec)


def _quadrant_words(center: tuple[int, int]) -> list[str]:
    r, c = center
    return ["top" if r < CANVAS // 2 else "bottom",
            "left" if c < CANVAS // 2 else "right"]


def make_edit_sample(spec: SceneSpec, render: np.ndarray,
                     rng: np.random.Generator) -> EditSample:
    """Pick one of recolor / move / change-background; the edited render
    differs from the original only in the edited attribute."""
    edit = ("recolor", "move", "change")[rng.integers(3)]
    entities = list(spec.entities)
    idx = int(rng.integers(len(entities)))
    e = entities[idx]
    used = {x.color for x in entities} | {spec.background}

    if edit == "recolor":
        fresh = [c for c in COLOR_NAMES if c not in used
                 and ((c, e.shape) not in RESERVED_COMBOS)]
        new_color = fresh[rng.integers(len(fresh))]
        entities[idx] = EntitySpec(e.shape, new_color, e.center, e.size)
        instruction = ["recolor", "the", e.color, e.shape, "to", new_color]
    elif edit == "move":
        others = entities[:idx] + entities[idx + 1:]
        moved = None
        for _ in range(1000):
            r = int(rng.integers(3, 15)) * 2
            c = int(rng.integers(3, 15)) * 2
            cand = EntitySpec(e.shape, e.color, (r, c), e.size)
            if _bbox_ok(cand, others) and \
                    _quadrant_words(cand.center) != _quadrant_words(e.center):
                moved = cand
                break
        if moved is None:
            raise RuntimeError("no free position for move edit")
        entities[idx] = moved
        instruction = (["move", "the", e.color, e.shape, "to", "the"]
                       + _quadrant_words(moved.center))
    else:
        fresh = [c for c in COLOR_NAMES
                 if c not in {x.color for x in entities}
                 and c != spec.background]
        new_bg = fresh[rng.integers(len(fresh))]
        instruction = ["change", "the", "background", "to", new_bg]
        edited = SceneSpec(background=new_bg, entities=tuple(entities))
        return _finish_edit(spec, render, edit, instruction, edited)

    edited = SceneSpec(background=spec.background, entities=tuple(entities))
    return _finish_edit(spec, render, edit, instruction, edited)


def _finish_edit(spec, render, edit, instruction, edited) -> EditSample:
    items = (tuple(_text(caption_scene(spec))) + (("image", render),)
             + tuple(_text(instruction)))
    return EditSample(items=items, target=render_scene(edited), edit=edit,
                      spec=spec, edited_spec=edited)


MIX_WEIGHTS = {"constructed": 2, "edit": 2, "caption": 1}


def mix_epoch(n: int, rng: np.random.Generator) -> list[str]:
    """Kind sequence for one epoch with counts apportioned 2:2:1 exactly
    (largest-remainder rounding), order shuffled."""
    if n < 5:
        raise ValueError(f"epoch size {n} < 5")
    total = sum(MIX_WEIGHTS.values())
    quotas = {k: n * w / total for k, w in MIX_WEIGHTS.items()}
    counts = {k: int(q) for k, q in quotas.items()}
    short = n - sum(counts.values())
    by_frac = sorted(MIX_WEIGHTS, key=lambda k: quotas[k] - counts[k],
                     reverse=True)
    for k in by_frac[:short]:
        counts[k] += 1
    kinds = [k for k, c in counts.items() for _ in range(c)]
    rng.shuffle(kinds)
    return kinds
