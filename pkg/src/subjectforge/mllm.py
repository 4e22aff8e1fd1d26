"""Causal multimodal language model over interleaved text/image sequences.

Image patches enter the token stream through a learned-query resampler that
compresses 16 patch embeddings to 4 positions, bracketed by special tokens.
Training maximizes next-token likelihood on text positions only; the final
hidden states double as the variable-length source embeddings handed to the
alignment bridge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchor import Anchor
from .datagen import GRAMMAR_WORDS
from .numerics import ShapeError, Tensor, ops
from .numerics.nn import (
    Embedding,
    LayerNorm,
    Linear,
    ParamModule,
    TransformerBlock,
    attention_block,
    init_param,
)

BOS, EOS, IMG_OPEN, IMG_CLOSE, PAD = "<s>", "</s>", "<image>", "</image>", "<pad>"
SPECIALS = (BOS, EOS, IMG_OPEN, IMG_CLOSE, PAD)

MODEL_DIM = 128
N_LAYERS = 4
N_HEADS = 4
FFN_DIM = 4 * MODEL_DIM
N_QUERIES = 4
MAX_EMBEDDED = 64
PATCH_DIM = 64


class Vocab:
    """Word <-> id table: specials first, grammar words after."""

    def __init__(self, words=GRAMMAR_WORDS):
        ordered = list(SPECIALS)
        for w in words:
            if w not in ordered:
                ordered.append(w)
        if len(ordered) > 128:
            raise ShapeError(f"vocabulary size {len(ordered)} exceeds 128")
        self._words = tuple(ordered)
        self._ids = {w: i for i, w in enumerate(ordered)}
        self.bos = self._ids[BOS]
        self.eos = self._ids[EOS]
        self.img_open = self._ids[IMG_OPEN]
        self.img_close = self._ids[IMG_CLOSE]
        self.pad = self._ids[PAD]

    def __len__(self) -> int:
        return len(self._words)

    def encode(self, word: str) -> int:
        if word not in self._ids:
            raise ShapeError(f"unknown token {word!r}")
        return self._ids[word]

    def decode(self, tid: int) -> str:
        return self._words[tid]

    def encode_words(self, words) -> list[int]:
        return [self.encode(w) for w in words]


@dataclass(frozen=True)
class TextToken:
    id: int


@dataclass(frozen=True, eq=False)
class ImageSlot:
    patches: np.ndarray   # (16, PATCH_DIM) anchor patch embeddings


@dataclass(frozen=True)
class InterleavedSequence:
    items: tuple
    embedded_len: int = field(init=False)

    def __post_init__(self):
        n = sum(N_QUERIES if isinstance(it, ImageSlot) else 1
                for it in self.items)
        object.__setattr__(self, "embedded_len", n)


def tokenize_interleaved(prompt_items, vocab: Vocab,
                         anchor: Anchor) -> InterleavedSequence:
    """Build `<s> ... <image> patches </image> ... </s>` from prompt items.

    prompt_items are ("text", word) / ("image", 3x32x32 array) pairs; images
    are encoded to patch embeddings by the frozen anchor.
    """
    items: list = [TextToken(vocab.bos)]
    for kind, value in prompt_items:
        if kind == "text":
            items.append(TextToken(vocab.encode(value)))
        elif kind == "image":
            arr = np.asarray(value, dtype=np.float32)
            if arr.shape != (3, 32, 32):
                raise ShapeError(f"image item has shape {arr.shape}")
            patches, _ = anchor.encode_image(Tensor(arr, _check=False))
            items.append(TextToken(vocab.img_open))
            items.append(ImageSlot(patches=patches.data))
            items.append(TextToken(vocab.img_close))
        else:
            raise ShapeError(f"unknown prompt item kind {kind!r}")
    items.append(TextToken(vocab.eos))
    seq = InterleavedSequence(items=tuple(items))
    if seq.embedded_len > MAX_EMBEDDED:
        raise ShapeError(f"sequence embeds to {seq.embedded_len} positions "
                         f"(limit {MAX_EMBEDDED})")
    return seq


class Mllm(ParamModule):
    def __init__(self, vocab: Vocab, rng: np.random.Generator,
                 d: int = MODEL_DIM, layers: int = N_LAYERS,
                 heads: int = N_HEADS):
        super().__init__()
        self.vocab = vocab
        self.d = d
        self.heads = heads
        self.tok_embed = Embedding(len(vocab), d, rng)
        self.pos_embed = init_param(rng, (MAX_EMBEDDED, d))
        self.queries = init_param(rng, (N_QUERIES, d))
        self.k_proj = Linear(PATCH_DIM, d, rng)
        self.v_proj = Linear(PATCH_DIM, d, rng)
        self.blocks = [TransformerBlock(d, heads, 4 * d, rng)
                       for _ in range(layers)]
        self.ln_f = LayerNorm(d)
        self.out_proj = Linear(d, len(vocab), rng)

    def resample(self, patches: Tensor) -> Tensor:
        """Compress a patch matrix to N_QUERIES rows via cross-attention.

        No output projection: over identical patches every row collapses to
        the value projection of the shared patch vector.
        """
        if patches.ndim != 2 or patches.shape[1] != PATCH_DIM:
            raise ShapeError(f"patch matrix shape {patches.shape}")
        return attention_block(self.queries, self.k_proj(patches),
                               self.v_proj(patches), heads=self.heads)

    def embed_sequence(self, seq: InterleavedSequence) -> Tensor:
        """Concatenate token embeddings and resampled slots, plus positions."""
        chunks: list[Tensor] = []
        run: list[int] = []
        for it in seq.items:
            if isinstance(it, TextToken):
                run.append(it.id)
            else:
                if run:
                    chunks.append(self.tok_embed(np.array(run)))
                    run = []
                patches = np.asarray(it.patches,
                                     dtype=self.tok_embed.table.dtype)
                chunks.append(self.resample(Tensor(patches, _check=False)))
        if run:
            chunks.append(self.tok_embed(np.array(run)))
        x = chunks[0] if len(chunks) == 1 else ops.concat(chunks, axis=0)
        return ops.add(x, self.pos_embed[:seq.embedded_len])

    def forward(self, seq: InterleavedSequence,
                dropout_p: float = 0.0,
                rng: np.random.Generator | None = None
                ) -> tuple[Tensor, Tensor]:
        """Run one sequence; returns (logits, source embeddings)."""
        out = self.forward_batch([seq], dropout_p=dropout_p, rng=rng)
        logits, source = out[0]
        return logits, source

    def forward_batch(self, seqs: list[InterleavedSequence],
                      dropout_p: float = 0.0,
                      rng: np.random.Generator | None = None
                      ) -> list[tuple[Tensor, Tensor]]:
        """Batched causal forward with right-padding.

        Padding keys are masked out of attention, so each sequence's logits
        and source rows are unaffected by the other batch members.
        """
        lengths = [s.embedded_len for s in seqs]
        L = max(lengths)
        rows = []
        pad_ids = np.array([self.vocab.pad])
        for s, n in zip(seqs, lengths):
            x = self.embed_sequence(s)
            if n < L:
                pad = self.tok_embed(np.repeat(pad_ids, L - n))
                x = ops.concat([x, pad], axis=0)
            rows.append(x)
        h = ops.stack(rows, axis=0)

        causal = np.tril(np.ones((L, L), dtype=bool))
        real = np.arange(L)[None, :] < np.array(lengths)[:, None]
        mask = causal[None, :, :] & real[:, None, :]
        for blk in self.blocks:
            h = blk(h, self_mask=mask, dropout_p=dropout_p, rng=rng)
        source = self.ln_f(h)
        logits = self.out_proj(source)
        return [(logits[i, :n], source[i, :n])
                for i, n in enumerate(lengths)]

    # -- loss ---------------------------------------------------------------

    def text_target_ids(self, seq: InterleavedSequence
                        ) -> tuple[np.ndarray, np.ndarray]:
        """(positions, target ids): embedded positions whose next embedded
        position is a text token; slot-internal targets are excluded."""
        kinds: list[int] = []
        ids: list[int] = []
        for it in seq.items:
            if isinstance(it, TextToken):
                kinds.append(1)
                ids.append(it.id)
            else:
                kinds += [0] * N_QUERIES
                ids += [-1] * N_QUERIES
        positions = []
        targets = []
        for i in range(len(kinds) - 1):
            if kinds[i + 1] == 1:
                positions.append(i)
                targets.append(ids[i + 1])
        return np.array(positions), np.array(targets)

    def lm_loss(self, seq: InterleavedSequence,
                dropout_p: float = 0.0,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.lm_loss_batch([seq], dropout_p=dropout_p, rng=rng)

    def lm_loss_batch(self, seqs: list[InterleavedSequence],
                      dropout_p: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
        """Mean negative log-likelihood over text-token targets only."""
        per_seq = [self.text_target_ids(s) for s in seqs]
        if sum(len(p) for p, _ in per_seq) == 0:
            raise ShapeError("no text targets in batch")
        outs = self.forward_batch(seqs, dropout_p=dropout_p, rng=rng)
        nlls = []
        for (logits, _), (positions, targets) in zip(outs, per_seq):
            lp = ops.log_softmax(logits)
            nlls.append(ops.neg(ops.pick(lp[positions], targets)))
        return ops.mean(ops.concat(nlls, axis=0))
