"""Parameter containers and transformer building blocks.

Modules hold named parameters; assignment of a Tensor or a sub-module
registers it automatically, so `named_params` walks the whole tree in a
deterministic construction order. All weights draw from an explicit
Generator, which makes parameter initialization a pure function of the
seed and the construction order.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


def init_param(rng: np.random.Generator, shape, std: float = INIT_STD,
               name: str | None = None) -> Tensor:
    data = rng.normal(0.0, std, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True, name=name)


class ParamModule:
    """Base container: tracks parameters and sub-modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, ParamModule):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and \
                all(isinstance(v, ParamModule) for v in value):
            self._children[key] = list(value)
        object.__setattr__(self, key, value)

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + k, p) for k, p in self._params.items()]
        for k, child in self._children.items():
            if isinstance(child, list):
                for i, c in enumerate(child):
                    out.extend(c.named_params(f"{prefix}{k}.{i}."))
            else:
                out.extend(child.named_params(f"{prefix}{k}."))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_params()}

    def load_state_(self, arrays: dict[str, np.ndarray]) -> None:
        """Strict load: names must match the module tree exactly."""
        named = dict(self.named_params())
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} "
                           f"extra={sorted(extra)}")
        for k, p in named.items():
            p.assign_(np.asarray(arrays[k], dtype=p.dtype))

    def convert_(self, dtype) -> "ParamModule":
        """Switch parameter precision in place (used for f64 gradchecks)."""
        for _, p in self.named_params():
            object.__setattr__(p, "data", p.data.astype(dtype))
            p.grad = None
        return self

    def digest(self) -> str:
        """sha256 over (name, dtype, shape, bytes) of every parameter."""
        h = hashlib.sha256()
        for k, p in self.named_params():
            h.update(k.encode())
            h.update(str(p.dtype).encode())
            h.update(str(p.shape).encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


class Linear(ParamModule):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.w = init_param(rng, (d_in, d_out))
        if bias:
            self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        if self.b is not None:
            y = ops.add(y, self.b)
        return y


class LayerNorm(ParamModule):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Embedding(ParamModule):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.table = init_param(rng, (n, d))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.table, ids)


def attention_block(q: Tensor, k: Tensor, v: Tensor,
                    mask: np.ndarray | None = None, heads: int = 1) -> Tensor:
    """Scaled dot-product attention with head splitting.

    q is (l_q, d) or (b, l_q, d); k and v are (l_k, d) or (b, l_k, d) with the
    same batching as q. The caller supplies already-projected q/k/v; there is
    no output projection here. mask is boolean with True marking admissible
    keys, shaped (l_q, l_k) or (b, l_q, l_k).
    """
    if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(f"attention rank mismatch: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention width mismatch: q {q.shape} vs k {k.shape}")
    if k.shape != v.shape:
        raise ShapeError(f"attention k/v mismatch: {k.shape} vs {v.shape}")
    if d % heads != 0:
        raise ShapeError(f"heads={heads} does not divide width {d}")

    squeeze = q.ndim == 2
    if squeeze:
        q = ops.reshape(q, (1,) + q.shape)
        k = ops.reshape(k, (1,) + k.shape)
        v = ops.reshape(v, (1,) + v.shape)
    b, l_q, _ = q.shape
    l_k = k.shape[1]
    dh = d // heads

    def split(x, l):
        return ops.transpose(ops.reshape(x, (b, l, heads, dh)), (0, 2, 1, 3))

    qh = split(q, l_q)
    kh = split(k, l_k)
    vh = split(v, l_k)
    scores = ops.scale(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))),
                       1.0 / np.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == (l_q, l_k):
            pass
        elif mask.shape == (b, l_q, l_k):
            mask = mask[:, None, :, :]
        else:
            raise ShapeError(f"attention mask shape {mask.shape}")
    att = ops.softmax(scores, mask=mask)
    out = ops.matmul(att, vh)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, l_q, d))
    if squeeze:
        out = ops.reshape(out, (l_q, d))
    return out


class MultiHeadAttention(ParamModule):
    """q/k/v/out projections around attention_block."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None):
        super().__init__()
        kv_dim = d_model if kv_dim is None else kv_dim
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(kv_dim, d_model, rng)
        self.wv = Linear(kv_dim, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        y = attention_block(self.wq(x_q), self.wk(x_kv), self.wv(x_kv),
                            mask=mask, heads=self.heads)
        return self.wo(y)


class FeedForward(ParamModule):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(d_model, d_ff, rng)
        self.lin2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ops.gelu(self.lin1(x)))


class TransformerBlock(ParamModule):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d_model: int, heads: int, d_ff: int,
                 rng: np.random.Generator, cross_dim: int | None = None):
        super().__init__()
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        if cross_dim is not None:
            self.ln_x = LayerNorm(d_model)
            self.cross = MultiHeadAttention(d_model, heads, rng, kv_dim=cross_dim)
        else:
            self.ln_x = None
            self.cross = None
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, self_mask: np.ndarray | None = None,
                 cond: Tensor | None = None,
                 dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        def drop(t):
            if dropout_p > 0.0 and rng is not None:
                return ops.dropout(t, dropout_p, rng)
            return t

        h = self.ln1(x)
        x = ops.add(x, drop(self.attn(h, h, mask=self_mask)))
        if self.cross is not None:
            if cond is None:
                raise ShapeError("block built with cross-attention needs cond")
            x = ops.add(x, drop(self.cross(self.ln_x(x), cond)))
        x = ops.add(x, drop(self.ffn(self.ln2(x))))
        return x


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
