"""Convolutional autoencoder providing the diffusion latent space.

Maps 3x32x32 images in [0,1] to 4x8x8 latents and back. The latent scale
factor is calibrated after training so latents have roughly unit variance,
which keeps the noise schedule's signal-to-noise ratios meaningful.
"""

from __future__ import annotations

import numpy as np

from ..numerics import ShapeError, Tensor, ops
from ..numerics.nn import ParamModule, init_param

IMAGE_SHAPE = (3, 32, 32)
LATENT_SHAPE = (4, 8, 8)


class Conv(ParamModule):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 k: int = 3, stride: int = 1, pad: int = 1):
        super().__init__()
        self.w = init_param(rng, (c_out, c_in, k, k))
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Vae(ParamModule):
    """Encoder/decoder pair; trained once, then frozen as the latent codec."""

    def __init__(self, rng: np.random.Generator, width: int = 32):
        super().__init__()
        w = width
        self.enc1 = Conv(3, w, rng)                      # 32x32
        self.enc2 = Conv(w, w, rng, stride=2)            # 16x16
        self.enc3 = Conv(w, w, rng, stride=2)            # 8x8
        self.enc4 = Conv(w, 4, rng)                      # 4x8x8
        self.dec1 = Conv(4, w, rng)                      # 8x8
        self.dec2 = Conv(w, w, rng)                      # 16x16 after upsample
        self.dec3 = Conv(w, w, rng)                      # 32x32 after upsample
        self.dec4 = Conv(w, 3, rng)
        # calibrated once post-training; stored as a parameter so it
        # checkpoints and freezes with the rest (rank-0 so it broadcasts)
        self.latent_scale = Tensor(np.float32(1.0), requires_grad=True)

    def encode(self, x: Tensor) -> Tensor:
        if x.shape[-3:] != IMAGE_SHAPE:
            raise ShapeError(f"expected image {IMAGE_SHAPE}, got {x.shape}")
        if float(x.data.min()) < 0.0 or float(x.data.max()) > 1.0:
            raise ShapeError("pixel values must lie in [0,1]")
        single = x.ndim == 3
        if single:
            x = ops.reshape(x, (1,) + x.shape)
        h = ops.gelu(self.enc1(x))
        h = ops.gelu(self.enc2(h))
        h = ops.gelu(self.enc3(h))
        z = ops.mul(self.enc4(h), self.latent_scale)
        if single:
            z = ops.reshape(z, LATENT_SHAPE)
        return z

    def decode(self, z: Tensor) -> Tensor:
        if z.shape[-3:] != LATENT_SHAPE:
            raise ShapeError(f"expected latent {LATENT_SHAPE}, got {z.shape}")
        single = z.ndim == 3
        if single:
            z = ops.reshape(z, (1,) + z.shape)
        z = ops.div(z, self.latent_scale)
        h = ops.gelu(self.dec1(z))
        h = ops.gelu(self.dec2(ops.upsample2(h)))
        h = ops.gelu(self.dec3(ops.upsample2(h)))
        x = ops.sigmoid(self.dec4(h))
        if single:
            x = ops.reshape(x, IMAGE_SHAPE)
        return x

    def reconstruction_loss(self, x: Tensor,
                            weights: Tensor | None = None) -> Tensor:
        """Mean squared reconstruction error, optionally pixel-weighted.

        Weights should average to 1 so the loss scale stays comparable to
        the unweighted form; callers use them to keep small foreground
        regions from being drowned out by the background.
        """
        d = ops.sub(self.decode(self.encode(x)), x)
        sq = ops.mul(d, d)
        if weights is not None:
            sq = ops.mul(weights, sq)
        return ops.mean(sq)

    def calibrate_scale_(self, images: Tensor) -> float:
        """Set latent_scale so encoded latents have unit std on a sample."""
        self.latent_scale.assign_(np.float32(1.0))
        z = self.encode(images)
        std = float(z.data.std())
        scale = np.float32(1.0 / max(std, 1e-6))
        self.latent_scale.assign_(scale)
        return float(scale)
