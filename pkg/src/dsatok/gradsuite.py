"""Registered finite-difference suites, one per trainable layer type.

Each suite builds a toy instance, contracts its output with a fixed random
tensor so the scalar loss touches every output entry, and returns the max
relative error between autodiff and central differences (float64).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from .ctc import ctc_loss
from .decoder import AdaNorm, DitBlock, DitConfig, FlowDecoder
from .fsq import FSQ, FsqConfig
from .speaker import AttnPool, speaker_loss
from .tensor import Tensor, finite_difference_check, ops

TOLERANCE = 1e-3
SUITES: dict[str, Callable[[], float]] = {}


def register(name: str):
    def deco(fn):
        SUITES[name] = fn
        return fn
    return deco


def _x(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True, name="x")


def _contract(y: Tensor, rng) -> Tensor:
    c = Tensor(rng.normal(size=y.shape))
    return ops.sum(y * c)


def _named(module: nn.Module) -> list[Tensor]:
    params = []
    for n, p in module.named_parameters():
        p.name = n
        params.append(p)
    return params


def _check(f, params, max_elems=12, eps=1e-4) -> float:
    return finite_difference_check(f, params, eps=eps, max_elems=max_elems)


@register("linear")
def linear() -> float:
    rng = np.random.default_rng(0)
    lin, x = nn.Linear(5, 4, rng), _x(rng, 2, 3, 5)
    return _check(lambda: _contract(lin(x), np.random.default_rng(1)), [x] + _named(lin))


@register("conv")
def conv() -> float:
    rng = np.random.default_rng(0)
    c, x = nn.Conv1d(3, 4, 5, rng, stride=2), _x(rng, 2, 9, 3)
    return _check(lambda: _contract(c(x), np.random.default_rng(1)), [x] + _named(c))


@register("transpose-conv")
def transpose_conv() -> float:
    rng = np.random.default_rng(0)
    c, x = nn.ConvTranspose1d(3, 4, 4, 2, rng), _x(rng, 2, 5, 3)
    return _check(lambda: _contract(c(x), np.random.default_rng(1)), [x] + _named(c))


@register("self-attention-rope")
def self_attention() -> float:
    rng = np.random.default_rng(0)
    att, x = nn.Attention(8, 2, rng), _x(rng, 2, 5, 8)
    mask = nn.time_mask([5, 3], 5)
    pos = np.arange(5)
    return _check(lambda: _contract(att(x, key_mask=mask, q_pos=pos, k_pos=pos), np.random.default_rng(1)),
                  [x] + _named(att))


@register("cross-attention-rope")
def cross_attention() -> float:
    rng = np.random.default_rng(0)
    att = nn.Attention(8, 2, rng, kv_dim=6)
    x, kv = _x(rng, 2, 5, 8), _x(rng, 2, 3, 6)
    kv.name = "kv"
    mask = nn.time_mask([3, 2], 3)
    return _check(lambda: _contract(att(x, kv, key_mask=mask, q_pos=np.arange(5), k_pos=np.arange(3)),
                                    np.random.default_rng(1)), [x, kv] + _named(att))


@register("adanorm")
def adanorm() -> float:
    rng = np.random.default_rng(0)
    norm = AdaNorm(6)
    x, sh, sc = _x(rng, 2, 4, 6), _x(rng, 2, 6), _x(rng, 2, 6)
    return _check(lambda: _contract(norm(x, sh, sc), np.random.default_rng(1)), [x, sh, sc])


@register("layer-norm")
def layer_norm() -> float:
    rng = np.random.default_rng(0)
    ln, x = nn.LayerNorm(6), _x(rng, 2, 4, 6)
    ln.weight.data = rng.normal(1, 0.2, size=6)
    return _check(lambda: _contract(ln(x), np.random.default_rng(1)), [x] + _named(ln))


@register("ffn")
def ffn() -> float:
    rng = np.random.default_rng(0)
    ff, x = nn.FeedForward(6, 12, rng), _x(rng, 2, 3, 6)
    return _check(lambda: _contract(ff(x), np.random.default_rng(1)), [x] + _named(ff))


@register("embedding")
def embedding() -> float:
    rng = np.random.default_rng(0)
    emb = nn.Embedding(7, 4, rng)
    ids = np.array([[0, 3, 3, 6], [1, 1, 2, 5]])
    return _check(lambda: _contract(emb(ids), np.random.default_rng(1)), _named(emb))


@register("gru")
def gru() -> float:
    rng = np.random.default_rng(0)
    g, x = nn.BiGRU(3, 4, rng), _x(rng, 2, 5, 3)
    mask = nn.time_mask([5, 3], 5)
    return _check(lambda: _contract(g(x, mask), np.random.default_rng(1)), [x] + _named(g))


@register("fsq-ste")
def fsq_ste() -> float:
    """Autodiff through the quantizer against FD of its straight-through surrogate.

    With identity backward through the snap, the gradient of c . q(x) must equal
    the gradient of c . tanh(x), the quantizer with rounding removed.
    """
    rng = np.random.default_rng(0)
    fsq = FSQ(FsqConfig(4, 3, 1))
    x = _x(rng, 2, 5, 3)
    c = Tensor(rng.normal(size=(2, 5, 3)))
    x.grad = None
    from .tensor import backward
    backward(ops.sum(fsq(x)[0] * c), [x])
    ad = x.grad.copy()
    x.grad = None
    eps = 1e-5
    fd = np.zeros_like(ad)
    base = x.data.astype(np.float64)
    for idx in np.ndindex(base.shape):
        d = np.zeros_like(base)
        d[idx] = eps
        fd[idx] = (np.sum(np.tanh(base + d) * c.data) - np.sum(np.tanh(base - d) * c.data)) / (2 * eps)
    return float(np.max(np.abs(ad - fd)) / (np.max(np.abs(fd)) + 1e-8))


@register("ctc")
def ctc() -> float:
    rng = np.random.default_rng(0)
    x = _x(rng, 2, 6, 4)
    return _check(lambda: ctc_loss(ops.log_softmax(x, axis=-1), [[0, 1], [2, 2]], lengths=[6, 5]), [x],
                  max_elems=None)


@register("attn-pool")
def attn_pool() -> float:
    rng = np.random.default_rng(0)
    pool, x = AttnPool(4, 5, 6, rng), _x(rng, 2, 5, 4)
    return _check(lambda: _contract(pool(x, [5, 3]), np.random.default_rng(1)), [x] + _named(pool))


@register("cosine-loss")
def cosine_loss() -> float:
    rng = np.random.default_rng(0)
    s, h = _x(rng, 3, 6), _x(rng, 3, 6)
    h.name = "h"
    return _check(lambda: speaker_loss(s, h), [s, h], max_elems=None)


@register("dit-block")
def dit_block() -> float:
    rng = np.random.default_rng(0)
    cfg = DitConfig(n_blocks=1, dim=8, heads=2, ffn_inner=16, n_mels=4, cond_dim=6)
    blk = DitBlock(cfg, rng)
    for p in (blk.ada.w, blk.ada.b):  # replace the zero init so gates are active
        p.data = rng.normal(0, 0.3, size=p.data.shape)
    x, temb, kv = _x(rng, 2, 4, 8), _x(rng, 2, 8), _x(rng, 2, 3, 6)
    pos = np.arange(4)
    return _check(lambda: _contract(blk(x, temb, kv, None, None, pos, np.arange(3)),
                                    np.random.default_rng(1)), [x, temb, kv] + _named(blk), max_elems=6)


@register("flow-decoder")
def flow_decoder() -> float:
    rng = np.random.default_rng(0)
    cfg = DitConfig(n_blocks=2, dim=8, heads=2, ffn_inner=16, n_mels=4, cond_dim=6)
    dec = FlowDecoder(cfg, 9, rng)
    for p in dec.parameters():
        if not np.any(p.data):
            p.data = rng.normal(0, 0.3, size=p.data.shape)
    m_t = Tensor(rng.normal(size=(2, 4, 4)))
    e_s = dec.adapter.upsample(np.array([[1, 5], [2, 8]]), 4)
    e_a = Tensor(rng.normal(size=(2, 3, 6)))
    drop = np.array([False, True])
    params = [p for n, p in dec.named_parameters() if not n.startswith("adapter.codebook")]
    for n, p in dec.named_parameters():
        p.name = n
    return _check(lambda: _contract(dec(m_t, np.array([0.3, 0.8]), e_s, e_a, drop=drop),
                                    np.random.default_rng(1)), params, max_elems=3)


def run_all(names=None, tol: float = TOLERANCE) -> dict[str, tuple[float, bool]]:
    out = {}
    for name in names or SUITES:
        err = SUITES[name]()
        out[name] = (err, err < tol)
    return out
