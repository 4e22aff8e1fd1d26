"""Denoiser for 4x8x8 latents, conditioned on a 16x64 matrix.

Small encoder/decoder over two resolutions (8x8 and 4x4) with residual
convolutions, timestep embeddings added per block, and cross-attention
from spatial positions to the condition rows. Also owns the learned null
condition used for the unconditional guidance branch.
"""

from __future__ import annotations

import numpy as np

from ..numerics import ShapeError, Tensor, ops
from ..numerics.nn import Linear, MultiHeadAttention, ParamModule, init_param
from .vae import Conv, LATENT_SHAPE

COND_LEN = 16
COND_DIM = 64


class ChannelNorm(ParamModule):
    """LayerNorm over the channel axis of NCHW maps."""

    def __init__(self, c: int):
        super().__init__()
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = ops.transpose(ops.reshape(x, (b, c, h * w)), (0, 2, 1))
        seq = ops.layer_norm(seq, self.gamma, self.beta)
        return ops.reshape(ops.transpose(seq, (0, 2, 1)), (b, c, h, w))


class ResBlock(ParamModule):
    def __init__(self, c: int, d_time: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = ChannelNorm(c)
        self.conv1 = Conv(c, c, rng)
        self.time_proj = Linear(d_time, c, rng)
        self.norm2 = ChannelNorm(c)
        self.conv2 = Conv(c, c, rng)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.gelu(self.norm1(x)))
        h = ops.add_spatial_bias(h, self.time_proj(temb))
        h = self.conv2(ops.gelu(self.norm2(h)))
        return ops.add(x, h)


class SpatialCrossAttention(ParamModule):
    """Residual cross-attention: each spatial position queries the condition."""

    def __init__(self, c: int, cond_dim: int, heads: int,
                 rng: np.random.Generator):
        super().__init__()
        self.norm = ChannelNorm(c)
        self.attn = MultiHeadAttention(c, heads, rng, kv_dim=cond_dim)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = ops.transpose(ops.reshape(self.norm(x), (b, c, h * w)), (0, 2, 1))
        y = self.attn(seq, cond)
        y = ops.reshape(ops.transpose(y, (0, 2, 1)), (b, c, h, w))
        return ops.add(x, y)


class UNet(ParamModule):
    def __init__(self, rng: np.random.Generator, width: int = 64,
                 T: int = 100, heads: int = 4,
                 cond_len: int = COND_LEN, cond_dim: int = COND_DIM):
        super().__init__()
        c = width
        self.T = T
        self.cond_len = cond_len
        self.cond_dim = cond_dim
        self.time_table = init_param(rng, (T + 1, c))
        self.time_mlp = Linear(c, c, rng)
        self.conv_in = Conv(4, c, rng)
        self.res_down = ResBlock(c, c, rng)
        self.attn_down = SpatialCrossAttention(c, cond_dim, heads, rng)
        self.downsample = Conv(c, c, rng, stride=2)        # 8x8 -> 4x4
        self.res_mid1 = ResBlock(c, c, rng)
        self.attn_mid = SpatialCrossAttention(c, cond_dim, heads, rng)
        self.res_mid2 = ResBlock(c, c, rng)
        self.fuse = Conv(2 * c, c, rng)                    # after skip concat
        self.res_up = ResBlock(c, c, rng)
        self.attn_up = SpatialCrossAttention(c, cond_dim, heads, rng)
        self.norm_out = ChannelNorm(c)
        self.conv_out = Conv(c, 4, rng)
        self.null_cond = init_param(rng, (cond_len, cond_dim))

    def _time_embedding(self, t) -> Tensor:
        t = np.asarray(t)
        if t.min() < 1 or t.max() > self.T:
            raise ShapeError(f"timestep out of [1, {self.T}]: {t}")
        return self.time_mlp(ops.gelu(ops.embedding(self.time_table, t)))

    def __call__(self, z: Tensor, cond: Tensor, t) -> Tensor:
        single = z.ndim == 3
        if single:
            z = ops.reshape(z, (1,) + z.shape)
        if z.shape[1:] != LATENT_SHAPE:
            raise ShapeError(f"latent shape {z.shape}")
        b = z.shape[0]
        if cond.ndim == 2:
            cond = ops.stack([cond] * b, axis=0)
        if cond.shape[0] != b or cond.shape[2] != self.cond_dim:
            raise ShapeError(f"condition shape {cond.shape} for batch {b}")
        if np.isscalar(t) or isinstance(t, (int, np.integer)):
            t = np.full(b, int(t))
        temb = self._time_embedding(t)

        h = self.conv_in(z)
        h = self.res_down(h, temb)
        h = self.attn_down(h, cond)
        skip = h
        h = self.downsample(h)
        h = self.res_mid1(h, temb)
        h = self.attn_mid(h, cond)
        h = self.res_mid2(h, temb)
        h = ops.upsample2(h)
        h = self.fuse(ops.concat([h, skip], axis=1))
        h = self.res_up(h, temb)
        h = self.attn_up(h, cond)
        out = self.conv_out(ops.gelu(self.norm_out(h)))
        if single:
            out = ops.reshape(out, LATENT_SHAPE)
        return out
