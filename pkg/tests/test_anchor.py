import numpy as np
import pytest

from subjectforge.anchor import (
    Anchor,
    EMBED_DIM,
    TEXT_LEN,
    contrastive_loss,
    contrastive_loss_from_sims,
)
from subjectforge.numerics import ShapeError, Tensor
from subjectforge.numerics.gradcheck import finite_diff_check


def _anchor(seed=0, vocab=32):
    return Anchor(vocab, np.random.default_rng(seed))


def test_text_encoding_deterministic():
    a = _anchor()
    ids = [3, 7, 7, 1]
    m1 = a.encode_text_target(ids)
    m2 = a.encode_text_target(ids)
    assert m1.shape == (TEXT_LEN, EMBED_DIM)
    assert np.array_equal(m1.data, m2.data)


def test_empty_caption_is_all_pad():
    a = _anchor()
    m = a.encode_text_target([])
    assert m.shape == (TEXT_LEN, EMBED_DIM)
    assert np.array_equal(m.data, np.tile(a.pad_vec.data, (TEXT_LEN, 1)))


def test_pad_tail_is_shared_across_captions():
    a = _anchor()
    m1 = a.encode_text_target([1, 2])
    m2 = a.encode_text_target([5, 9, 11])
    assert np.array_equal(m1.data[3:], m2.data[3:])
    assert np.array_equal(m1.data[2], a.pad_vec.data)


def test_pad_slots_do_not_leak_into_real_rows():
    # pad positions reuse embedding row 0 internally; perturbing that row
    # must not move real rows of a caption that never uses id 0
    a = _anchor()
    m1 = a.encode_text_target([4, 8])
    table = a.tok.table.data.copy()
    table[0] += 1.0
    a.tok.table.assign_(table)
    m2 = a.encode_text_target([4, 8])
    assert np.array_equal(m1.data, m2.data)


def test_unknown_token_id_rejected():
    a = _anchor(vocab=16)
    with pytest.raises(ShapeError, match="unknown token"):
        a.encode_text_target([3, 99])


def test_image_encoding_shapes_and_norm():
    a = _anchor()
    x = Tensor(np.random.default_rng(1).random((3, 32, 32)).astype(np.float32))
    patches, pooled = a.encode_image(x)
    assert patches.shape == (16, EMBED_DIM)
    assert pooled.shape == (EMBED_DIM,)
    assert np.linalg.norm(pooled.data) == pytest.approx(1.0, abs=1e-6)


def test_identical_images_identical_embeddings():
    a = _anchor()
    x = np.random.default_rng(2).random((3, 32, 32)).astype(np.float32)
    p1, _ = a.encode_image(Tensor(x))
    p2, _ = a.encode_image(Tensor(x.copy()))
    assert np.array_equal(p1.data, p2.data)


def test_image_geometry_rejected():
    a = _anchor()
    with pytest.raises(ShapeError):
        a.encode_image(Tensor(np.zeros((3, 16, 16), dtype=np.float32)))


def test_batch_matches_single_encoders():
    a = _anchor()
    imgs = np.random.default_rng(3).random((3, 3, 32, 32)).astype(np.float32)
    batch_p, batch_pool = a.encode_image_batch(Tensor(imgs))
    for i in range(3):
        p, pool = a.encode_image(Tensor(imgs[i]))
        assert np.allclose(batch_p.data[i], p.data, atol=1e-6)
        assert np.allclose(batch_pool.data[i], pool.data, atol=1e-6)
    ids = [[1, 2, 3], [4, 5], [6, 7, 8, 9]]
    batch_t = a.encode_text_batch(ids)
    for i, seq in enumerate(ids):
        assert np.allclose(batch_t.data[i],
                           a.encode_text_target(seq).data, atol=1e-6)


def test_contrastive_identity_sims_value():
    loss = contrastive_loss_from_sims(Tensor(np.eye(2)), temperature=1.0)
    assert loss.item() == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-5)
    assert loss.item() == pytest.approx(0.31326, abs=1e-5)


def test_contrastive_uniform_sims_value():
    for n in (2, 4, 8):
        loss = contrastive_loss_from_sims(Tensor(np.ones((n, n))),
                                          temperature=1.0)
        assert loss.item() == pytest.approx(np.log(n), abs=1e-6)


def test_contrastive_batch_minimum():
    with pytest.raises(ShapeError):
        contrastive_loss_from_sims(Tensor(np.ones((1, 1))), temperature=1.0)
    with pytest.raises(ShapeError):
        contrastive_loss(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))),
                         temperature=1.0)


def test_contrastive_loss_gradcheck():
    rng = np.random.default_rng(4)
    a = Anchor(16, np.random.default_rng(5)).convert_(np.float64)
    imgs = Tensor(rng.random((2, 3, 32, 32)))
    ids = [[1, 2, 3], [4, 5, 6]]

    def loss_fn():
        _, img_pool = a.encode_image_batch(imgs)
        txt_pool = a.pooled_text_batch(ids)
        return contrastive_loss(img_pool, txt_pool, temperature=0.5)

    probe = [a.pad_vec, a.patch_proj.w, a.tok.table, a.text_pos,
             a.text_blocks[0].attn.wq.w, a.image_blocks[1].ffn.lin1.w]
    rep = finite_diff_check(loss_fn, probe, max_entries=5)
    assert rep.ok, str(rep)
