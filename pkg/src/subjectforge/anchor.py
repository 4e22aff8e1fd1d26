"""Contrastively trained text/image encoder pair.

The text side produces the 16x64 target matrices that condition the image
decoder; the image side supplies patch embeddings for the multimodal LM and
pooled vectors for retrieval scoring. Both are trained once against each
other on caption/render pairs, then frozen for every later stage.
"""

from __future__ import annotations

import numpy as np

from .numerics import ShapeError, Tensor, ops
from .numerics.nn import Embedding, Linear, ParamModule, TransformerBlock, init_param

TEXT_LEN = 16
EMBED_DIM = 64
PATCH = 8
N_PATCHES = 16
DEFAULT_TEMPERATURE = 0.1


class Anchor(ParamModule):
    """Frozen-after-stage-0 encoder pair with a shared embedding width."""

    def __init__(self, vocab_size: int, rng: np.random.Generator,
                 heads: int = 4, temperature: float = DEFAULT_TEMPERATURE):
        super().__init__()
        self.vocab_size = vocab_size
        self.temperature = temperature
        d = EMBED_DIM
        self.tok = Embedding(vocab_size, d, rng)
        self.pad_vec = init_param(rng, (d,))
        self.text_pos = init_param(rng, (TEXT_LEN, d))
        self.text_blocks = [TransformerBlock(d, heads, 4 * d, rng)
                            for _ in range(2)]
        self.patch_proj = Linear(3 * PATCH * PATCH, d, rng)
        self.patch_pos = init_param(rng, (N_PATCHES, d))
        self.image_blocks = [TransformerBlock(d, heads, 4 * d, rng)
                             for _ in range(2)]

    # -- text ---------------------------------------------------------------

    def encode_text_target(self, ids) -> Tensor:
        """Map token ids to the fixed 16x64 target matrix.

        Real positions carry transformer outputs; padding positions carry the
        learned pad vector, so captions shorter than 16 tokens always produce
        the same tail. Attention is masked so pads never influence real rows.
        """
        out = self.encode_text_batch([list(ids)])
        return ops.reshape(out, (TEXT_LEN, EMBED_DIM))

    def encode_text_batch(self, ids_batch: list[list[int]]) -> Tensor:
        b = len(ids_batch)
        lengths = []
        padded = np.zeros((b, TEXT_LEN), dtype=np.int64)
        for i, ids in enumerate(ids_batch):
            ids = list(ids)[:TEXT_LEN]
            for tid in ids:
                if not 0 <= tid < self.vocab_size:
                    raise ShapeError(f"unknown token id {tid}")
            lengths.append(len(ids))
            padded[i, :len(ids)] = ids
        lengths = np.array(lengths)

        if (lengths == 0).all():
            rows = ops.stack([self.pad_vec] * TEXT_LEN, axis=0)
            return ops.stack([rows] * b, axis=0)
        if (lengths == 0).any():
            raise ShapeError("mixed empty/non-empty captions in one batch")

        x = ops.add(self.tok(padded), self.text_pos)
        key_real = np.arange(TEXT_LEN)[None, :] < lengths[:, None]
        mask = np.repeat(key_real[:, None, :], TEXT_LEN, axis=1)
        for blk in self.text_blocks:
            x = blk(x, self_mask=mask)
        # overwrite padding rows with the pad vector; masks are materialized
        # at full shape because broadcasting is suffix-only
        keep = Tensor(np.repeat(key_real[:, :, None], EMBED_DIM,
                                axis=2).astype(x.dtype.type))
        pad_fill = Tensor(np.repeat(~key_real[:, :, None], EMBED_DIM,
                                    axis=2).astype(x.dtype.type))
        pad_mat = ops.stack([ops.stack([self.pad_vec] * TEXT_LEN, axis=0)] * b,
                            axis=0)
        return ops.add(ops.mul(x, keep), ops.mul(pad_mat, pad_fill))

    def pooled_text(self, ids) -> Tensor:
        mat = self.encode_text_target(ids)
        n = min(len(list(ids)), TEXT_LEN)
        rows = mat if n == 0 else mat[:n]
        return ops.l2_normalize(ops.mean(rows, axis=0))

    def pooled_text_batch(self, ids_batch: list[list[int]]) -> Tensor:
        mats = self.encode_text_batch(ids_batch)
        pools = []
        for i, ids in enumerate(ids_batch):
            n = min(len(list(ids)), TEXT_LEN)
            rows = mats[i] if n == 0 else mats[i, :n]
            pools.append(ops.mean(rows, axis=0))
        return ops.l2_normalize(ops.stack(pools, axis=0))

    # -- image --------------------------------------------------------------

    def encode_image(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (patch matrix 16x64, pooled unit vector) for one image."""
        if x.shape != (3, 32, 32):
            raise ShapeError(f"expected 3x32x32 image, got {x.shape}")
        patches, pooled = self.encode_image_batch(ops.reshape(x, (1, 3, 32, 32)))
        return (ops.reshape(patches, (N_PATCHES, EMBED_DIM)),
                ops.reshape(pooled, (EMBED_DIM,)))

    def encode_image_batch(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
            raise ShapeError(f"expected Bx3x32x32 images, got {x.shape}")
        b = x.shape[0]
        grid = 32 // PATCH
        p = ops.reshape(x, (b, 3, grid, PATCH, grid, PATCH))
        p = ops.transpose(p, (0, 2, 4, 1, 3, 5))
        p = ops.reshape(p, (b, N_PATCHES, 3 * PATCH * PATCH))
        h = ops.add(self.patch_proj(p), self.patch_pos)
        for blk in self.image_blocks:
            h = blk(h)
        pooled = ops.l2_normalize(ops.mean(h, axis=1))
        return h, pooled


def contrastive_loss(img_pool: Tensor, txt_pool: Tensor,
                     temperature: float) -> Tensor:
    """Symmetric cross-entropy over the pooled similarity matrix."""
    if img_pool.shape != txt_pool.shape or img_pool.ndim != 2:
        raise ShapeError(f"pooled shapes {img_pool.shape} vs {txt_pool.shape}")
    if img_pool.shape[0] < 2:
        raise ShapeError("contrastive batch must have >= 2 pairs")
    sims = ops.matmul(img_pool, ops.transpose(txt_pool, (1, 0)))
    return contrastive_loss_from_sims(sims, temperature)


def contrastive_loss_from_sims(sims: Tensor, temperature: float) -> Tensor:
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sims.shape}")
    if sims.shape[0] < 2:
        raise ShapeError("contrastive batch must have >= 2 pairs")
    n = sims.shape[0]
    logits = ops.scale(sims, 1.0 / temperature)
    diag = np.arange(n)
    loss_i = ops.neg(ops.mean(ops.pick(ops.log_softmax(logits), diag)))
    logits_t = ops.transpose(logits, (1, 0))
    loss_t = ops.neg(ops.mean(ops.pick(ops.log_softmax(logits_t), diag)))
    return ops.scale(ops.add(loss_i, loss_t), 0.5)
