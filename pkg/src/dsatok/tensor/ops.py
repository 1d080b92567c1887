"""Differentiable primitives.

Layout convention for sequence ops is (batch, time, channels). Every primitive
checks operand shapes up front and raises ``ShapeError`` rather than relying
on numpy to broadcast something unintended.
"""

from __future__ import annotations

import builtins
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import NonFiniteError, ShapeError, Tensor, as_tensor, default_dtype

CHECK_FINITE = True


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a} and {b}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = _finite(ad / bd, "div")

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return Tensor.from_op(out, (a, b), bw, "div")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(default_dtype())
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = _finite(np.exp(x.data), "exp")
    return Tensor.from_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    y = _finite(np.log(xd), "log")
    return Tensor.from_op(y, (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    y = _finite(np.sqrt(x.data), "sqrt")
    return Tensor.from_op(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg = np.expm1(np.minimum(xd, 0.0))
    y = np.where(xd > 0, xd, neg)
    return Tensor.from_op(y, (x,), lambda g: (g * np.where(xd > 0, 1.0, neg + 1.0),), "elu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (np.tanh(0.5 * xd) + 1.0)
    return Tensor.from_op(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * xd * (1.0 + 0.044715 * xd * xd)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)
    return Tensor.from_op(y, (x,), bw, "gelu")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(default_dtype()),)
    return Tensor.from_op(y, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {old} -> {shape}") from None
    return Tensor.from_op(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    y = x.data[idx]
    if y.size == 0:
        raise ShapeError(f"slice {idx!r} of {shape} is empty")

    def bw(g):
        out = np.zeros(shape, dtype=default_dtype())
        if _needs_add_at(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)
    return Tensor.from_op(np.array(y, dtype=default_dtype()), (x,), bw, "slice")


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    nd = xs[0].ndim
    axis = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or builtins.any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))
    return Tensor.from_op(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                   for x in xs], axis=axis)


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad axis 1 of a (B, T, C) tensor."""
    if left < 0 or right < 0:
        raise ShapeError("negative padding")
    T = x.shape[1]
    y = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    return Tensor.from_op(y, (x,), lambda g: (g[:, left:left + T],), "pad")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matmul; a (..., n, k) @ b (..., k, m). A 2-D b is shared over the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    y = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return Tensor.from_op(y, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., d_in) @ w (d_in, d_out) + b (d_out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} for w {w.shape}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    y = flat @ wd
    if b is not None:
        y = y + b.data
    y = y.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb
    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(y, parents, bw, "linear")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """x (B, T, C_in), w (K, C_in, C_out) -> (B, T_out, C_out).

    T_out = (T + 2*padding - K) // stride + 1, zero padding on both sides.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape}, w {w.shape}")
    K, cin, cout = w.shape
    B, T, _ = x.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d: bias {b.shape}")
    Tp = T + 2 * padding
    if Tp < K:
        raise ShapeError(f"conv1d: input length {T} too short for kernel {K}")
    t_out = (Tp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    # (B, T_out, C_in, K) -> (B, T_out, K, C_in)
    win = sliding_window_view(xp, K, axis=1)[:, ::stride][:, :t_out]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * t_out, K * cin)
    wd = w.data.reshape(K * cin, cout)
    y = cols @ wd
    if b is not None:
        y += b.data
    y = y.reshape(B, t_out, cout)

    def bw(g):
        g2 = g.reshape(B * t_out, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ wd.T).reshape(B, t_out, K, cin)
            gxp = np.zeros((B, Tp, cin), dtype=default_dtype())
            span = stride * (t_out - 1) + 1
            for k in range(K):
                gxp[:, k:k + span:stride] += gcols[:, :, k]
            gx = gxp[:, padding:padding + T]
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(K, cin, cout)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb
    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(y, parents, bw, "conv1d")


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of conv1d in the input: x (B, T, C_in), w (K, C_in, C_out).

    T_out = (T - 1) * stride + K - 2 * padding.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv_transpose1d: x {x.shape}, w {w.shape}")
    K, cin, cout = w.shape
    B, T, _ = x.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose1d: bias {b.shape}")
    full = (T - 1) * stride + K
    t_out = full - 2 * padding
    if t_out < 1:
        raise ShapeError("conv_transpose1d: empty output")
    xd, wd = x.data, w.data
    # (B*T, C_in) @ (C_in, K*C_out)
    wk = np.ascontiguousarray(wd.transpose(1, 0, 2)).reshape(cin, K * cout)
    contrib = (xd.reshape(B * T, cin) @ wk).reshape(B, T, K, cout)
    yf = np.zeros((B, full, cout), dtype=default_dtype())
    span = stride * (T - 1) + 1
    for k in range(K):
        yf[:, k:k + span:stride] += contrib[:, :, k]
    y = yf[:, padding:padding + t_out]
    if b is not None:
        y = y + b.data

    def bw(g):
        gf = np.pad(g, ((0, 0), (padding, padding), (0, 0)))
        win = np.stack([gf[:, k:k + span:stride] for k in range(K)], axis=2)  # (B, T, K, C_out)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (win.reshape(B * T, K * cout) @ wk.T).reshape(B, T, cin)
        if w.requires_grad:
            gwk = xd.reshape(B * T, cin).T @ win.reshape(B * T, K * cout)
            gw = gwk.reshape(cin, K, cout).transpose(1, 0, 2)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb
    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(np.ascontiguousarray(y), parents, bw, "conv_transpose1d")


# ---------------------------------------------------------------- normalisation / softmax

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable, bool) marks positions kept.

    Masked positions get probability exactly 0, regardless of the values there.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a row is fully masked")
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(default_dtype())

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor.from_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return Tensor.from_op(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optional affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def bw(g):
        gx = None
        gxhat = g * weight.data if weight is not None else g
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gw = _unbroadcast(g * xhat, weight.shape) if weight is not None and weight.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    y = xhat
    if weight is not None:
        if weight.shape != (n,):
            raise ShapeError(f"layer_norm weight {weight.shape}")
        y = y * weight.data
    if bias is not None:
        y = y + bias.data
    parents = [x, weight if weight is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0)]
    return Tensor.from_op(y, parents, bw, "layer_norm")


# ---------------------------------------------------------------- lookup / interpolation

def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)
    return Tensor.from_op(table.data[ids], (table,), bw, "embedding")


def interp_matrix(src_len: int, dst_len: int) -> np.ndarray:
    """(dst_len, src_len) linear-interpolation weights, half-sample aligned.

    Output row i samples source position (i + 0.5) * src_len / dst_len - 0.5,
    clamped to the source range.
    """
    if src_len < 1 or dst_len < 1:
        raise ShapeError("interpolation lengths must be >= 1")
    pos = (np.arange(dst_len) + 0.5) * (src_len / dst_len) - 0.5
    pos = np.clip(pos, 0.0, src_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src_len - 1)
    frac = pos - lo
    A = np.zeros((dst_len, src_len), dtype=np.float64)
    A[np.arange(dst_len), lo] += 1.0 - frac
    A[np.arange(dst_len), hi] += frac
    return A.astype(default_dtype())


def interpolate_linear(x: Tensor, dst_len: int) -> Tensor:
    """Resample axis 1 of (B, T, C) to ``dst_len`` frames."""
    if x.ndim != 3:
        raise ShapeError(f"interpolate_linear expects (B, T, C), got {x.shape}")
    A = interp_matrix(x.shape[1], dst_len)
    xd = x.data
    y = np.einsum("ts,bsc->btc", A, xd)
    return Tensor.from_op(y, (x,), lambda g: (np.einsum("ts,btc->bsc", A, g),), "interpolate")


# ---------------------------------------------------------------- position encodings

def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0):
    """cos/sin tables (..., T, dim) for rotate-half RoPE."""
    if dim % 2:
        raise ShapeError("RoPE head dim must be even")
    half = dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    cos = np.cos(ang)
    sin = np.sin(ang)
    return (np.concatenate([cos, cos], -1).astype(default_dtype()),
            np.concatenate([sin, sin], -1).astype(default_dtype()))


def _rotate_half(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([-a[..., h:], a[..., :h]], axis=-1)


def _rotate_half_t(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([a[..., h:], -a[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on the last axis: x*cos + rotate_half(x)*sin."""
    if cos.shape[-1] != x.shape[-1]:
        raise ShapeError(f"rope: table dim {cos.shape[-1]} vs x {x.shape}")
    xd = x.data
    y = xd * cos + _rotate_half(xd) * sin

    def bw(g):
        return (g * cos + _rotate_half_t(g * sin),)
    return Tensor.from_op(y, (x,), bw, "rope")


# ---------------------------------------------------------------- similarity

def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; zero vectors are an error."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine: {a.shape} vs {b.shape}")
    ad, bd = a.data.astype(np.float64), b.data.astype(np.float64)
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity of a zero vector")
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def bw(g):
        g = np.expand_dims(g, axis).astype(np.float64)
        ga = g * (bd / (na * nb) - c * ad / (na * na))
        gb = g * (ad / (na * nb) - c * bd / (nb * nb))
        return ga.astype(default_dtype()), gb.astype(default_dtype())
    return Tensor.from_op(np.squeeze(c, axis=axis), (a, b), bw, "cosine")
