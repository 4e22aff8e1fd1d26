"""Image fidelity oracle plus the lightweight embedding metrics."""

import numpy as np
import pytest

from subjectforge import datagen
from subjectforge.mllm import Mllm, Vocab, tokenize_interleaved
from subjectforge.numerics import Tensor, spawn_rng
from subjectforge.anchor import Anchor
from subjectforge.pipeline.evaluate import (
    COLOR_TOLERANCE,
    perplexity,
    retrieval_top1,
    score_entity,
    score_fidelity,
)


def _scene(seed, n=None):
    rng = np.random.default_rng(seed)
    while True:
        spec, render = datagen.gen_scene(rng)
        if n is None or len(spec.entities) == n:
            return spec, render


def _ents(spec):
    return [(e.shape, e.color, e.size) for e in spec.entities]


def test_exact_render_scores_one():
    for seed in range(5):
        spec, render = _scene(seed)
        assert score_fidelity(render, _ents(spec)) == pytest.approx(1.0)


def test_uniform_gray_scores_zero():
    spec, _ = _scene(0)
    gray = np.full((3, 32, 32), datagen.NEUTRAL_GRAY, dtype=np.float32)
    assert score_fidelity(gray, _ents(spec)) == 0.0


def test_one_of_two_entities_scores_half():
    spec, render = _scene(3, n=2)
    erased = render.copy()
    mask = datagen.footprint_mask(spec.entities[1].shape,
                                  spec.entities[1].center,
                                  spec.entities[1].size)
    erased[:, mask] = datagen.NEUTRAL_GRAY
    assert score_fidelity(erased, _ents(spec)) == pytest.approx(0.5)


@pytest.mark.parametrize("shape", datagen.SHAPES)
def test_blob_centroid_recovers_offset_footprints(shape):
    # paint the shape away from every training position; the detector must
    # re-anchor from the blob centroid alone
    spec = datagen.SceneSpec(
        background="white",
        entities=(datagen.EntitySpec(shape=shape, color="red",
                                     center=(20, 9), size=4),))
    render = datagen.render_scene(spec)
    assert score_entity(render, shape, "red", 4) == pytest.approx(1.0)


def test_wrong_color_scores_zero():
    spec, render = _scene(1, n=1)
    e = spec.entities[0]
    wrong = next(c for c in datagen.COLOR_NAMES
                 if c not in (e.color, spec.background))
    assert score_entity(render, e.shape, wrong, e.size) == 0.0


def test_partial_color_patch_scores_fractionally():
    img = np.full((3, 32, 32), datagen.NEUTRAL_GRAY, dtype=np.float32)
    img[:, 10:14, 10:12] = np.array(datagen.PALETTE["red"]).reshape(3, 1, 1)
    s = score_entity(img, "square", "red", 4)
    assert 0.0 < s < 1.0


def test_no_entities_rejected():
    with pytest.raises(ValueError):
        score_fidelity(np.zeros((3, 32, 32)), [])


def test_color_tolerance_excludes_neutral_gray():
    # gray sits 0.5*sqrt(3) ~ 0.87 from the nearest palette corner, well
    # outside the matching radius, so empty canvases never match anything
    assert COLOR_TOLERANCE < 0.5 * np.sqrt(3.0)


def test_perplexity_of_uniform_model_is_vocab_size():
    vocab = Vocab()
    mllm = Mllm(vocab, spawn_rng(0, "ppl"), d=32, layers=1, heads=2)
    mllm.out_proj.w.assign_(np.zeros_like(mllm.out_proj.w.data))
    mllm.out_proj.b.assign_(np.zeros_like(mllm.out_proj.b.data))
    spec, render = _scene(2)
    seq = tokenize_interleaved(
        [("text", w) for w in datagen.caption_scene(spec)],
        vocab, Anchor(len(vocab), spawn_rng(0, "ppl-anchor")))
    assert perplexity([seq], mllm) == pytest.approx(len(vocab), rel=1e-4)


def test_retrieval_returns_fraction_in_unit_range():
    anchor = Anchor(len(Vocab()), spawn_rng(0, "retr"))
    specs, renders = [], []
    for i in range(4):
        spec, render = _scene(10 + i)
        specs.append(spec)
        renders.append(render)
    captions = [datagen.caption_scene(s) for s in specs]
    acc = retrieval_top1(np.stack(renders), captions, Vocab(), anchor)
    assert 0.0 <= acc <= 1.0
    again = retrieval_top1(np.stack(renders), captions, Vocab(), anchor)
    assert acc == again
