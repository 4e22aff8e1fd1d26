"""Alignment bridge between the language model and the image decoder.

The language model emits source embeddings of shape (l, 128) for variable l;
the frozen decoder expects a fixed (16, 64) condition matrix shaped like the
anchor text encoder's output. The bridge has two halves:

* a forward mapper producing the condition matrix from any source, and
* a reconstructing mapper going back to the source space,

each built as a small encoder plus a latent-query decoder. The reconstruction
path exists purely as a training regularizer; inference only uses the forward
half.
"""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, ops
from .numerics.nn import Linear, ParamModule, TransformerBlock, init_param
from .numerics.tensor import ShapeError

SOURCE_DIM = 128
CONDITION_LEN = 16
CONDITION_DIM = 64
MAX_SOURCE_LEN = 64
_INNER_DIM = 64
_FF_DIM = 256
_HEADS = 4

RECONSTRUCTION_WEIGHT = 1.0


class LatentQueryMapper(ParamModule):
    """Variable-length-in, query-length-out sequence mapper.

    Encoder blocks contextualize the projected input; decoder blocks run a
    learned query bank through self-attention and cross-attention into the
    encoded input. Output length equals the number of queries used, which
    decouples it from the input length entirely.
    """

    def __init__(self, in_dim: int, out_dim: int, n_queries: int,
                 rng: np.random.Generator, depth: int = 2):
        super().__init__()
        self.in_proj = Linear(in_dim, _INNER_DIM, rng)
        self.queries = init_param(rng, (n_queries, _INNER_DIM))
        self.enc_blocks = [TransformerBlock(_INNER_DIM, _HEADS, _FF_DIM, rng)
                           for _ in range(depth)]
        self.dec_blocks = [TransformerBlock(_INNER_DIM, _HEADS, _FF_DIM, rng,
                                            cross_dim=_INNER_DIM)
                           for _ in range(depth)]
        self.out_proj = Linear(_INNER_DIM, out_dim, rng)
        self.in_dim = in_dim
        self.n_queries = n_queries

    def __call__(self, x: Tensor, n_out: int | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"mapper expects (l, {self.in_dim}), "
                             f"got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("mapper needs at least one input row")
        n = self.n_queries if n_out is None else n_out
        if not 1 <= n <= self.n_queries:
            raise ShapeError(f"output length {n} outside [1, "
                             f"{self.n_queries}]")
        h = self.in_proj(x)
        for blk in self.enc_blocks:
            h = blk(h)
        q = self.queries if n == self.n_queries else self.queries[:n]
        for blk in self.dec_blocks:
            q = blk(q, cond=h)
        return self.out_proj(q)


class Aligner(ParamModule):
    """Two latent-query mappers tied by the alignment objective."""

    def __init__(self, rng: np.random.Generator, depth: int = 2):
        super().__init__()
        self.to_condition = LatentQueryMapper(SOURCE_DIM, CONDITION_DIM,
                                              CONDITION_LEN, rng, depth=depth)
        self.to_source = LatentQueryMapper(CONDITION_DIM, SOURCE_DIM,
                                           MAX_SOURCE_LEN, rng, depth=depth)

    def encode(self, source: Tensor) -> Tensor:
        """Map a (l, 128) source to the fixed (16, 64) condition matrix."""
        return self.to_condition(source)

    def decode(self, condition: Tensor, target_len: int) -> Tensor:
        """Rebuild a (target_len, 128) source from a condition matrix."""
        if condition.ndim != 2 or condition.shape != (CONDITION_LEN,
                                                      CONDITION_DIM):
            raise ShapeError(f"condition must be ({CONDITION_LEN}, "
                             f"{CONDITION_DIM}), got {condition.shape}")
        return self.to_source(condition, n_out=target_len)

    def losses(self, source: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
        """Alignment and reconstruction losses, both mean over elements.

        The first term pulls the mapped source toward the anchor text target;
        the second asks the round trip to give the source back, which keeps
        the mapping from collapsing onto whatever the decoder ignores.
        """
        if target.shape != (CONDITION_LEN, CONDITION_DIM):
            raise ShapeError(f"target must be ({CONDITION_LEN}, "
                             f"{CONDITION_DIM}), got {target.shape}")
        cond = self.encode(source)
        diff = ops.sub(target, cond)
        align = ops.mean(ops.mul(diff, diff))
        rebuilt = self.decode(cond, source.shape[0])
        rdiff = ops.sub(source, rebuilt)
        recon = ops.mean(ops.mul(rdiff, rdiff))
        return align, recon

    def total_loss(self, source: Tensor, target: Tensor) -> Tensor:
        align, recon = self.losses(source, target)
        return ops.add(align, ops.scale(recon, RECONSTRUCTION_WEIGHT))
