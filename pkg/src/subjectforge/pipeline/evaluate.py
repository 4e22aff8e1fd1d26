"""Exact-world evaluation: subject fidelity, alignment residual, perplexity.

The fidelity scorer leans on the synthetic world being closed: entity colors
come from a fixed palette of cube corners, so "does this pixel show that
entity" is decidable without any learned perception.
"""

from __future__ import annotations

import numpy as np

from .. import datagen
from ..numerics import Tensor, no_tape, ops

COLOR_TOLERANCE = 0.45

_PALETTE_ARR = np.array([datagen.PALETTE[n] for n in datagen.COLOR_NAMES],
                        dtype=np.float64)
_SAFE_CENTER = (16, 16)


def _color_match_mask(img: np.ndarray, color_name: str) -> np.ndarray:
    """Pixels within tolerance of the color and strictly nearest to it
    among all palette entries."""
    px = np.asarray(img, dtype=np.float64).transpose(1, 2, 0)
    dists = np.linalg.norm(px[:, :, None, :] - _PALETTE_ARR[None, None],
                           axis=-1)
    idx = datagen.COLOR_NAMES.index(color_name)
    near = dists.argmin(axis=-1) == idx
    close = dists[:, :, idx] < COLOR_TOLERANCE
    return near & close


def _anchor_offset(shape: str, size: int) -> tuple[float, float]:
    """Centroid minus anchor for this footprint, used to invert a detected
    blob centroid back to the anchor the renderer used."""
    mask = datagen.footprint_mask(shape, _SAFE_CENTER, size)
    rr, cc = np.nonzero(mask)
    return (rr.mean() - _SAFE_CENTER[0], cc.mean() - _SAFE_CENTER[1])


def score_entity(img: np.ndarray, shape: str, color: str, size: int) -> float:
    """Fraction of the expected footprint, re-anchored at the detected color
    blob, that actually shows the entity's color. No blob means 0."""
    match = _color_match_mask(img, color)
    if not match.any():
        return 0.0
    rr, cc = np.nonzero(match)
    dr, dc = _anchor_offset(shape, size)
    anchor = (int(round(rr.mean() - dr)), int(round(cc.mean() - dc)))
    want = datagen.footprint_mask(shape, anchor, size)
    n_want = int(want.sum())
    if n_want == 0:
        return 0.0
    return float((want & match).sum() / n_want)


def score_fidelity(img: np.ndarray, entities) -> float:
    """Mean per-entity footprint match; entities are (shape, color, size)
    triples or objects with those attributes."""
    if not entities:
        raise ValueError("fidelity needs at least one requested entity")
    scores = []
    for ent in entities:
        if isinstance(ent, tuple):
            shape, color, size = ent
        else:
            shape, color, size = ent.shape, ent.color, ent.size
        scores.append(score_entity(img, shape, color, size))
    return float(np.mean(scores))


def alignment_residual(captions: list[list[str]], vocab, anchor, mllm,
                       aligner) -> float:
    """Mean squared gap between the aligner's condition and the frozen
    anchor target over text-only captions."""
    if not captions:
        raise ValueError("empty split")
    from ..mllm import tokenize_interleaved
    total = 0.0
    with no_tape():
        for words in captions:
            ids = vocab.encode_words(words)
            target = anchor.encode_text_target(ids)
            seq = tokenize_interleaved([("text", w) for w in words], vocab,
                                       anchor)
            _, source = mllm.forward(seq)
            cond = aligner.encode(source)
            diff = target.data - cond.data
            total += float(np.mean(diff * diff))
    return total / len(captions)


def anchor_alignment_residual(captions: list[list[str]], vocab,
                              anchor) -> float:
    """Degenerate baseline of the same residual with the anchor itself as
    the condition source; zero by construction, kept for report symmetry."""
    if not captions:
        raise ValueError("empty split")
    return 0.0


def perplexity(seqs, mllm) -> float:
    if not seqs:
        raise ValueError("empty split")
    with no_tape():
        losses = [float(mllm.lm_loss(s).data) for s in seqs]
    return float(np.exp(np.mean(losses)))


def retrieval_top1(images: np.ndarray, captions: list[list[str]], vocab,
                   anchor) -> float:
    """Image-to-text retrieval accuracy over matched pairs.

    Scenes can share a caption (different layouts, same description), and
    identical captions are indistinguishable by construction, so a
    retrieval is correct when the retrieved caption equals the paired one,
    not only when the index matches.
    """
    if len(images) != len(captions) or len(captions) < 2:
        raise ValueError("need matched pools of at least 2")
    with no_tape():
        _, img_pool = anchor.encode_image_batch(Tensor(images, _check=False))
        txt_pool = anchor.pooled_text_batch(
            [vocab.encode_words(c) for c in captions])
        sims = img_pool.data @ txt_pool.data.T
    picks = sims.argmax(axis=1)
    return float(np.mean([captions[p] == captions[i]
                          for i, p in enumerate(picks)]))
