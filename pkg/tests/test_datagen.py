import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subjectforge.datagen import (
    CANVAS,
    GrammarError,
    NEUTRAL_GRAY,
    PALETTE,
    RESERVED_COMBOS,
    SHAPES,
    caption_scene,
    extract_entities,
    footprint_mask,
    gen_scene,
    make_caption_sample,
    make_constructed_sample,
    make_edit_sample,
    mix_epoch,
    render_scene,
    segment_entity,
)


def test_fixed_seed_reproduces_scene_bitwise():
    s1, r1 = gen_scene(np.random.default_rng(123))
    s2, r2 = gen_scene(np.random.default_rng(123))
    assert s1 == s2
    assert np.array_equal(r1, r2)


def test_entity_center_pixel_has_entity_color():
    for seed in range(50):
        spec, render = gen_scene(np.random.default_rng(seed))
        for e in spec.entities:
            r, c = e.center
            assert tuple(render[:, r, c]) == PALETTE[e.color]


def test_scene_invariants_hold_in_bulk():
    for seed in range(300):
        spec, render = gen_scene(np.random.default_rng(seed))
        assert 1 <= len(spec.entities) <= 3
        colors = [e.color for e in spec.entities]
        assert len(set(colors)) == len(colors)
        assert spec.background not in colors
        masks = [footprint_mask(e.shape, e.center, e.size)
                 for e in spec.entities]
        for i in range(len(masks)):
            assert masks[i].any()
            for j in range(i + 1, len(masks)):
                assert not (masks[i] & masks[j]).any()


def test_reserved_combos_never_generated():
    for seed in range(300):
        spec, _ = gen_scene(np.random.default_rng(seed))
        for e in spec.entities:
            assert (e.color, e.shape) not in RESERVED_COMBOS


def test_square_footprint_pixel_count():
    for k in (3, 4, 5):
        assert footprint_mask("square", (16, 16), k).sum() == k * k


def test_triangle_footprint_pixel_count():
    for k in (3, 4, 5):
        assert footprint_mask("triangle", (16, 16), k).sum() == k * k


def test_caption_grammar_shape():
    spec, _ = gen_scene(np.random.default_rng(0), n_entities=2)
    words = caption_scene(spec)
    assert words.count("and") == 1
    assert words[-1] == "background"
    assert words[-3] == "on"


def test_extract_entities_examples():
    words = "a red circle and a blue square on green background".split()
    assert extract_entities(words) == ["red circle", "blue square"]
    single = "a white triangle on black background".split()
    assert extract_entities(single) == ["white triangle"]


def test_extract_rejects_off_grammar():
    with pytest.raises(GrammarError):
        extract_entities("a red circle on green".split())
    with pytest.raises(GrammarError):
        extract_entities("a red xylophone on green background".split())
    with pytest.raises(GrammarError):
        extract_entities("on green background".split())


def test_caption_extract_roundtrip_10k():
    rng = np.random.default_rng(42)
    for _ in range(10_000):
        spec, _ = gen_scene(rng)
        phrases = extract_entities(caption_scene(spec))
        assert phrases == [e.phrase for e in spec.entities]


def test_segmentation_matches_footprint():
    spec, render = gen_scene(np.random.default_rng(9), n_entities=3)
    union = np.zeros((CANVAS, CANVAS), dtype=bool)
    for e in spec.entities:
        seg, mask = segment_entity(render, spec, e.phrase)
        expect = footprint_mask(e.shape, e.center, e.size)
        assert np.array_equal(mask, expect)
        assert not (union & mask).any()
        union |= mask
        # off-entity pixels are neutral gray when background is dropped
        assert (seg[:, ~mask] == NEUTRAL_GRAY).all()
        assert np.array_equal(seg[:, mask], render[:, mask])


def test_segmentation_keep_background():
    spec, render = gen_scene(np.random.default_rng(10), n_entities=2)
    e0, e1 = spec.entities
    seg, _ = segment_entity(render, spec, e0.phrase, keep_background=True)
    m0 = footprint_mask(e0.shape, e0.center, e0.size)
    m1 = footprint_mask(e1.shape, e1.center, e1.size)
    bg = np.asarray(PALETTE[spec.background], dtype=np.float32)
    assert np.array_equal(seg[:, m0], render[:, m0])
    # the other entity is scrubbed to the background color
    assert (seg[:, m1] == bg[:, None]).all()


def test_segment_unknown_phrase():
    spec, render = gen_scene(np.random.default_rng(11), n_entities=1)
    with pytest.raises(GrammarError):
        segment_entity(render, spec, "nonexistent thing")


def test_constructed_sample_layout():
    rng = np.random.default_rng(12)
    spec, render = gen_scene(rng, n_entities=2)
    sample = make_constructed_sample(spec, render, np.random.default_rng(1))
    kinds = [k for k, _ in sample.items]
    assert kinds.count("image") == 2
    assert np.array_equal(sample.target, render)
    # dropped phrases remove the article+color+shape but keep the slot
    words = [v for k, v in sample.items if k == "text"]
    for i, e in enumerate(spec.entities):
        if not sample.text_dropped[i]:
            assert e.color in words and e.shape in words


def test_constructed_drop_rates():
    rng = np.random.default_rng(13)
    spec, render = gen_scene(np.random.default_rng(0), n_entities=2)
    n = 10_000
    text_drops = 0
    bg_keeps = 0
    for _ in range(n):
        s = make_constructed_sample(spec, render, rng)
        text_drops += sum(s.text_dropped)
        bg_keeps += s.background_kept
    assert abs(text_drops / (2 * n) - 0.5) < 0.02
    assert abs(bg_keeps / n - 0.5) < 0.02


def test_edit_sample_diff_confined():
    rng = np.random.default_rng(14)
    for seed in range(40):
        spec, render = gen_scene(np.random.default_rng(seed), n_entities=2)
        s = make_edit_sample(spec, render, rng)
        diff = np.abs(s.target - render).sum(axis=0) > 0
        if s.edit == "recolor":
            changed = [(a, b) for a, b in zip(spec.entities, s.edited_spec.entities)
                       if a != b]
            (orig, new), = changed
            mask = footprint_mask(orig.shape, orig.center, orig.size)
            assert orig.center == new.center and orig.shape == new.shape
            assert not diff[~mask].any()
        elif s.edit == "move":
            assert s.edited_spec.background == spec.background
        else:
            union = np.zeros((CANVAS, CANVAS), dtype=bool)
            for e in spec.entities:
                union |= footprint_mask(e.shape, e.center, e.size)
            assert not diff[union].any()


def test_edit_sequence_contains_original_render():
    rng = np.random.default_rng(15)
    spec, render = gen_scene(np.random.default_rng(2), n_entities=1)
    s = make_edit_sample(spec, render, rng)
    images = [v for k, v in s.items if k == "image"]
    assert len(images) == 1
    assert np.array_equal(images[0], render)


def test_caption_sample_is_text_only():
    spec, render = gen_scene(np.random.default_rng(3), n_entities=1)
    s = make_caption_sample(spec, render)
    assert all(k == "text" for k, _ in s.items)
    assert [v for _, v in s.items] == caption_scene(spec)


def test_mix_epoch_exact_counts():
    for n, expect in ((5, (2, 2, 1)), (50, (20, 20, 10)),
                      (1000, (400, 400, 200))):
        kinds = mix_epoch(n, np.random.default_rng(0))
        got = (kinds.count("constructed"), kinds.count("edit"),
               kinds.count("caption"))
        assert got == expect


@given(st.integers(5, 2000))
@settings(max_examples=50, deadline=None)
def test_mix_epoch_within_one_of_proportional(n):
    kinds = mix_epoch(n, np.random.default_rng(1))
    assert len(kinds) == n
    for kind, w in (("constructed", 2), ("edit", 2), ("caption", 1)):
        assert abs(kinds.count(kind) - n * w / 5) < 1


def test_mix_epoch_rejects_tiny_epoch():
    with pytest.raises(ValueError):
        mix_epoch(4, np.random.default_rng(0))
