"""Layers built on the tensor core.

Every sequence layer works on (batch, time, channels). Initialisation draws
from an explicit ``numpy.random.Generator`` so a model is a pure function of
its seed.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype, ops
from .tensor.autograd import ShapeError


class Module:
    """Parameter container; parameters are Tensor attributes, children are Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str = "",
                        strict: bool = True) -> None:
        for n, p in self.named_parameters():
            key = prefix + n
            if key not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {key}")
                continue
            arr = np.asarray(arrays[key])
            if arr.shape != p.data.shape:
                raise ShapeError(f"{key}: checkpoint {arr.shape} vs model {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


def param(arr: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True, name=name)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def time_mask(lengths, T: int) -> np.ndarray:
    """(B, T) boolean mask, True on valid frames."""
    lengths = np.asarray(lengths)
    return np.arange(T)[None, :] < lengths[:, None]


def apply_mask(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Zero frames beyond each sequence's valid length; no-op for ``mask=None``."""
    if mask is None:
        return x
    return x * mask[:, :, None].astype(default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else _uniform(rng, (d_in, d_out), d_in)
        self.w = param(w)
        self.b = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class Conv1d(Module):
    """'same'-padded (for stride 1) 1-D convolution with kernel (K, C_in, C_out)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, zero: bool = False):
        shape = (kernel, c_in, c_out)
        self.w = param(np.zeros(shape) if zero else _uniform(rng, shape, c_in * kernel))
        self.b = param(np.zeros(c_out))
        self._stride = stride
        self._padding = kernel // 2 if padding is None else padding

    def out_len(self, T: int) -> int:
        K = self.w.shape[0]
        return (T + 2 * self._padding - K) // self._stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.w, self.b, stride=self._stride, padding=self._padding)


class ConvTranspose1d(Module):
    """Transposed conv whose output length is exactly ``stride * T``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator):
        if (kernel - stride) % 2:
            raise ValueError("kernel - stride must be even for exact stride*T output")
        shape = (kernel, c_in, c_out)
        self.w = param(_uniform(rng, shape, c_in * max(1, kernel // stride)))
        self.b = param(np.zeros(c_out))
        self._stride = stride
        self._padding = (kernel - stride) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose1d(x, self.w, self.b, stride=self._stride, padding=self._padding)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        self.weight = param(np.ones(dim)) if affine else None
        self.bias = param(np.zeros(dim)) if affine else None
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, eps=self._eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 1.0):
        self.table = param(rng.normal(0.0, std, size=(n, dim)))

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.table, ids)


class FeedForward(Module):
    def __init__(self, dim: int, inner: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, inner, rng)
        self.fc2 = Linear(inner, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention with rotary positions on queries and keys.

    ``kv`` defaults to ``x`` (self-attention). ``key_mask`` is (B, T_k) bool.
    Positions default to 0..T-1 for both streams.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None,
                 rope: bool = True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(kv_dim, dim, rng)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._heads = heads
        self._rope = rope

    def _split(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        h = self._heads
        return ops.transpose(ops.reshape(x, (B, T, h, D // h)), (0, 2, 1, 3))

    def logits(self, x: Tensor, kv: Tensor | None = None, q_pos=None, k_pos=None) -> Tensor:
        kv = x if kv is None else kv
        q = self._split(self.wq(x))
        k = self._split(self.wk(kv))
        dh = q.shape[-1]
        if self._rope:
            q_pos = np.arange(x.shape[1]) if q_pos is None else np.asarray(q_pos)
            k_pos = np.arange(kv.shape[1]) if k_pos is None else np.asarray(k_pos)
            cq, sq = ops.rope_tables(q_pos, dh)
            ck, sk = ops.rope_tables(k_pos, dh)
            q = ops.rope(q, cq, sq)
            k = ops.rope(k, ck, sk)
        return ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))

    def __call__(self, x: Tensor, kv: Tensor | None = None, key_mask: np.ndarray | None = None,
                 q_pos=None, k_pos=None) -> Tensor:
        kv_in = x if kv is None else kv
        att = self.logits(x, kv_in, q_pos, k_pos)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        p = ops.softmax(att, axis=-1, mask=mask)
        v = self._split(self.wv(kv_in))
        out = ops.matmul(p, v)
        B, H, T, dh = out.shape
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, T, H * dh))
        return self.wo(out)


class TransformerLayer(Module):
    """Pre-norm self-attention + FFN block."""

    def __init__(self, dim: int, heads: int, inner: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, inner, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.ffn(self.norm2(x))


# ---------------------------------------------------------------- recurrent

def gru_cell(xt: Tensor, h: Tensor, wh: Tensor, bh: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """One GRU step with gates ordered (reset, update, candidate).

    ``xt`` holds the precomputed input projections (B, 3H). Rows whose
    ``mask`` entry is False carry ``h`` through unchanged.
    """
    H = h.shape[-1]
    if xt.shape[-1] != 3 * H or wh.shape != (H, 3 * H):
        raise ShapeError(f"gru_cell: xt {xt.shape}, h {h.shape}, wh {wh.shape}")
    hd, xd = h.data, xt.data
    hh = hd @ wh.data + bh.data
    r = 0.5 * (np.tanh(0.5 * (xd[:, :H] + hh[:, :H])) + 1.0)
    z = 0.5 * (np.tanh(0.5 * (xd[:, H:2 * H] + hh[:, H:2 * H])) + 1.0)
    n = np.tanh(xd[:, 2 * H:] + r * hh[:, 2 * H:])
    hn = n + z * (hd - n)
    m = np.ones((hd.shape[0], 1), dtype=hd.dtype) if mask is None else \
        np.asarray(mask, dtype=hd.dtype).reshape(-1, 1)
    out = m * hn + (1.0 - m) * hd

    def bw(g):
        g_hn = m * g
        g_z = g_hn * (hd - n)
        g_n = g_hn * (1.0 - z)
        g_an = g_n * (1.0 - n * n)
        g_ar = g_an * hh[:, 2 * H:] * r * (1.0 - r)
        g_az = g_z * z * (1.0 - z)
        g_hh = np.concatenate([g_ar, g_az, g_an * r], axis=1)
        g_x = np.concatenate([g_ar, g_az, g_an], axis=1)
        g_h = (1.0 - m) * g + g_hn * z + g_hh @ wh.data.T
        return g_x, g_h, hd.T @ g_hh, g_hh.sum(axis=0)
    return Tensor.from_op(out, (xt, h, wh, bh), bw, "gru_cell")


class GRU(Module):
    """Single-direction GRU over (B, T, C); ``reverse`` runs right to left."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, reverse: bool = False):
        self.wx = Linear(d_in, 3 * hidden, rng)
        self.wh = param(_uniform(rng, (hidden, 3 * hidden), hidden))
        self.bh = param(np.zeros(3 * hidden))
        self._hidden = hidden
        self._reverse = reverse

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, T, _ = x.shape
        xs = self.wx(x)
        h = Tensor(np.zeros((B, self._hidden)))
        outs: list[Tensor | None] = [None] * T
        steps = range(T - 1, -1, -1) if self._reverse else range(T)
        for t in steps:
            h = gru_cell(xs[:, t], h, self.wh, self.bh, None if mask is None else mask[:, t])
            outs[t] = h
        return ops.stack(outs, axis=1)


class BiGRU(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = GRU(d_in, hidden, rng)
        self.bwd = GRU(d_in, hidden, rng, reverse=True)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return ops.concat([self.fwd(x, mask), self.bwd(x, mask)], axis=-1)
