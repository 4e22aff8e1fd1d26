"""Differentiable primitives over Tensor.

Each primitive computes its forward value eagerly, then registers a node
carrying a replayable forward closure and a backward rule that maps the
output gradient to per-input gradients. Binary ops accept a mix of Tensor
and python scalars; two-tensor operands must share a dtype and be
suffix-broadcastable.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    record,
    suffix_broadcastable,
    unbroadcast,
)

_GELU_C = math.sqrt(2.0 / math.pi)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), _check=False)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if not suffix_broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not "
                         "suffix-broadcastable")


# -- arithmetic --------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "add")
    out = a.data + b.data
    return record("add", out, (a, b), lambda: a.data + b.data,
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "sub")
    out = a.data - b.data
    return record("sub", out, (a, b), lambda: a.data - b.data,
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "mul")
    out = a.data * b.data
    return record("mul", out, (a, b), lambda: a.data * b.data,
                  lambda g: (unbroadcast(g * b.data, a.shape),
                             unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_binary(a, b, "div")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data / b.data
    return record("div", out, (a, b), lambda: a.data / b.data,
                  lambda g: (unbroadcast(g / b.data, a.shape),
                             unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda: -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar without creating a constant node."""
    c = float(c)
    return record("scale", a.data * c, (a,), lambda: a.data * c,
                  lambda g: (g * c,))


def row_scale(a: Tensor, coeffs: np.ndarray) -> Tensor:
    """Multiply each leading-dim slice by its own constant coefficient."""
    coeffs = np.asarray(coeffs, dtype=a.dtype)
    if coeffs.shape != (a.shape[0],):
        raise ShapeError(f"row_scale: need ({a.shape[0]},) coeffs, "
                         f"got {coeffs.shape}")
    c = coeffs.reshape((-1,) + (1,) * (a.ndim - 1))
    return record("row_scale", a.data * c, (a,), lambda: a.data * c,
                  lambda g: (g * c,))


def add_spatial_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to NCHW maps: x[b,c,h,w] + bias[b,c]."""
    if x.ndim != 4 or bias.ndim != 2 or bias.shape != x.shape[:2]:
        raise ShapeError(f"add_spatial_bias: {x.shape} vs {bias.shape}")
    out = x.data + bias.data[:, :, None, None]
    return record("add_spatial_bias", out, (x, bias),
                  lambda: x.data + bias.data[:, :, None, None],
                  lambda g: (g, g.sum(axis=(2, 3))))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return record("power", out, (a,), lambda: a.data ** p,
                  lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda: np.exp(a.data),
                  lambda g, _out=out: (g * _out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return record("log", out, (a,), lambda: np.log(a.data),
                  lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda: np.sqrt(a.data),
                  lambda g, _out=out: (g * 0.5 / _out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda: np.tanh(a.data),
                  lambda g, _out=out: (g * (1.0 - _out * _out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return record("sigmoid", out, (a,), lambda: 1.0 / (1.0 + np.exp(-a.data)),
                  lambda g, _out=out: (g * _out * (1.0 - _out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return record("relu", out, (a,), lambda: np.maximum(a.data, 0.0),
                  lambda g: (g * (a.data > 0.0),))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU with its analytic derivative."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g, _t=t, _x=x):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * _x * _x)
        return (g * (0.5 * (1.0 + _t) + 0.5 * _x * (1.0 - _t * _t) * d_inner),)

    def fw(_x=x):
        ti = np.tanh(_GELU_C * (_x + 0.044715 * _x ** 3))
        return 0.5 * _x * (1.0 + ti)

    return record("gelu", out, (a,), fw, bw)


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record("sum", np.asarray(out), (a,),
                  lambda: np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- structure ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return record("reshape", out, (a,), lambda: a.data.reshape(shape),
                  lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", out, (a,),
                  lambda: np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record("getitem", np.ascontiguousarray(out), (a,),
                  lambda: np.ascontiguousarray(np.asarray(a.data[idx])), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]),
                                         axis=axis))
            for i in range(len(parts)))

    return record("concat", out, tuple(parts),
                  lambda: np.concatenate([p.data for p in parts], axis=axis), bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("stack of zero tensors")
    out = np.stack([p.data for p in parts], axis=axis)

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis))
                     for i in range(len(parts)))

    return record("stack", out, tuple(parts),
                  lambda: np.stack([p.data for p in parts], axis=axis), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if a.ndim != 2 and b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (unbroadcast(ga, a.shape), unbroadcast(gb, b.shape))

    return record("matmul", out, (a, b), lambda: np.matmul(a.data, b.data), bw)


# -- normalization / probability --------------------------------------------

def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis with max-subtraction.

    `mask` (boolean, True = admissible) is suffix-broadcastable to a.shape;
    masked positions get weight 0. A row with no admissible entry is an error.
    """
    x = a.data
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: fully-masked row")
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        e = np.exp(x - m) * mask
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g, _s=s):
        dot = (g * _s).sum(axis=-1, keepdims=True)
        return (_s * (g - dot),)

    def fw(_mask=mask):
        xx = a.data
        if _mask is None:
            ee = np.exp(xx - xx.max(axis=-1, keepdims=True))
        else:
            nn = np.where(_mask, xx, -np.inf)
            ee = np.exp(xx - nn.max(axis=-1, keepdims=True)) * _mask
        return ee / ee.sum(axis=-1, keepdims=True)

    return record("softmax", s, (a,), fw, bw)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse

    def bw(g, _out=out):
        return (g - np.exp(_out) * g.sum(axis=-1, keepdims=True),)

    def fw():
        xx = a.data
        mm = xx.max(axis=-1, keepdims=True)
        return xx - (mm + np.log(np.exp(xx - mm).sum(axis=-1, keepdims=True)))

    return record("log_softmax", out, (a,), fw, bw)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g, _xhat=xhat, _inv=inv):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * _xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = _inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - _xhat * (gx_hat * _xhat).mean(axis=-1, keepdims=True))
        return (gx, g_gamma, g_beta)

    def fw():
        xx = a.data
        mm = xx.mean(axis=-1, keepdims=True)
        cc = xx - mm
        vv = (cc * cc).mean(axis=-1, keepdims=True)
        return cc / np.sqrt(vv + eps) * gamma.data + beta.data

    return record("layer_norm", out, (a, gamma, beta), fw, bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the sampled mask is captured so replay is exact."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype)
    factor = 1.0 / (1.0 - p)
    out = a.data * keep * factor
    return record("dropout", out, (a,), lambda: a.data * keep * factor,
                  lambda g: (g * keep * factor,))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    out = x / norm

    def bw(g, _out=out, _norm=norm):
        dot = (g * _out).sum(axis=-1, keepdims=True)
        return ((g - _out * dot) / _norm,)

    def fw():
        xx = a.data
        nn = np.sqrt((xx * xx).sum(axis=-1, keepdims=True) + eps)
        return xx / nn

    return record("l2_normalize", out, (a,), fw, bw)


# -- lookup ------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: index out of range")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record("embedding", np.ascontiguousarray(out), (table,),
                  lambda: np.ascontiguousarray(table.data[ids]), bw)


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row column selection: a is (n, v), idx is (n,), result (n,)."""
    idx = np.asarray(idx)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need (n,v) and (n,), got {a.shape}, {idx.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return record("pick", np.ascontiguousarray(out), (a,),
                  lambda: np.ascontiguousarray(a.data[rows, idx]), bw)


# -- convolution stack -------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))
    return np.ascontiguousarray(windows).reshape(b, c * kh * kw, ho * wo), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW 2-D convolution via im2col + GEMM."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    co, ci, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols)                      # (B, co, ho*wo)
    if b is not None:
        out = out + b.data[None, :, None]
    out = out.reshape(x.shape[0], co, ho, wo)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g, _cols=cols):
        gmat = g.reshape(g.shape[0], co, ho * wo)
        gw = np.matmul(gmat, _cols.transpose(0, 2, 1)).sum(axis=0)
        gcols = np.matmul(wmat.T, gmat)              # (B, ci*kh*kw, ho*wo)
        gx = _col2im(gcols, x.shape, kh, kw, stride, pad, ho, wo)
        grads = [gx, gw.reshape(w.shape)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    def fw():
        cc, _, _ = _im2col(x.data, kh, kw, stride, pad)
        oo = np.matmul(w.data.reshape(co, ci * kh * kw), cc)
        if b is not None:
            oo = oo + b.data[None, :, None]
        return oo.reshape(x.shape[0], co, ho, wo)

    return record("conv2d", out, inputs, fw, bw)


def _col2im(gcols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    bsz, c, h, w = x_shape
    gpad = np.zeros((bsz, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    gc = gcols.reshape(bsz, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[:, :, i, j]
    if pad:
        return np.ascontiguousarray(gpad[:, :, pad:-pad, pad:-pad])
    return gpad


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of NCHW maps."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return record("upsample2", out, (x,),
                  lambda: x.data.repeat(2, axis=2).repeat(2, axis=3), bw)


# -- operator bindings -------------------------------------------------------

def _install_operators() -> None:
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(self, other)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__rsub__ = lambda self, other: sub(_as_tensor(other, like=self), self)
    Tensor.__mul__ = lambda self, other: (
        scale(self, other) if isinstance(other, (int, float)) else mul(self, other))
    Tensor.__rmul__ = Tensor.__mul__
    Tensor.__truediv__ = lambda self, other: (
        scale(self, 1.0 / other) if isinstance(other, (int, float))
        else div(self, other))
    Tensor.__rtruediv__ = lambda self, other: div(_as_tensor(other, like=self), self)
    Tensor.__neg__ = neg
    Tensor.__matmul__ = matmul
    Tensor.__pow__ = power
    Tensor.__getitem__ = getitem
    Tensor.sum = tsum
    Tensor.mean = mean
    Tensor.reshape = reshape
    Tensor.transpose = transpose


_install_operators()
