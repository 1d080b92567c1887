"""Flow-matching DiT decoder.

The velocity network sees the noisy mel ``m_t``, a frame-aligned semantic
condition added to every block input through a small CNN adapter, and an
unaligned acoustic condition reached through cross-attention. The timestep
drives adaptive layer norms (shift, scale, gate per sublayer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import Tensor, no_grad, ops
from .tensor.autograd import ShapeError


@dataclass(frozen=True)
class DitConfig:
    n_blocks: int = 4
    dim: int = 128
    heads: int = 4
    ffn_inner: int = 512
    n_mels: int = 80
    cond_dim: int = 128
    adapter_layers: int = 3

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")


# ---------------------------------------------------------------- flow path

def interpolate_path(m0: np.ndarray, m: np.ndarray, t) -> np.ndarray:
    """m_t = (1 - t) m0 + t m, with ``t`` scalar or per-batch (B,)."""
    m0, m = np.asarray(m0), np.asarray(m)
    if m0.shape != m.shape:
        raise ShapeError(f"path endpoints differ in shape: {m0.shape} vs {m.shape}")
    t = np.asarray(t, dtype=m.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (m.ndim - 1))
    return (1 - t) * m0 + t * m


def target_velocity(m0: np.ndarray, m: np.ndarray) -> np.ndarray:
    if np.shape(m0) != np.shape(m):
        raise ShapeError("path endpoints differ in shape")
    return np.asarray(m) - np.asarray(m0)


def cfg_velocity(v_cond, v_uncond, omega: float = 2.0):
    """v_c + omega (v_c - v_u)."""
    if omega < 0:
        raise ValueError("guidance scale must be non-negative")
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ShapeError("conditional and unconditional velocities differ in shape")
    return v_cond + omega * (v_cond - v_uncond)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], scaled by 1000 as in diffusion practice."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# ---------------------------------------------------------------- semantic adapter

class SemanticAdapter(nn.Module):
    """Token codebook, linear interpolation to mel length, then a 3-layer CNN (kernel 3, padding 1)."""

    def __init__(self, n_codes: int, emb_dim: int, out_dim: int, rng: np.random.Generator,
                 layers: int = 3):
        self.codebook = nn.Embedding(n_codes, emb_dim, rng, std=1.0)
        dims = [emb_dim] + [out_dim] * layers
        self.convs = [nn.Conv1d(dims[i], dims[i + 1], 3, rng, padding=1) for i in range(layers)]

    def upsample(self, z_s: np.ndarray, T_mel: int) -> Tensor:
        """(B, T_s) ids -> (B, T_mel, emb_dim)."""
        if T_mel < 1:
            raise ValueError("T_mel must be >= 1")
        z_s = np.asarray(z_s)
        if z_s.ndim == 1:
            z_s = z_s[None]
        if z_s.shape[1] < 1:
            raise ValueError("need at least one semantic token")
        return ops.interpolate_linear(self.codebook(z_s), T_mel)

    def upsample_batch(self, z_s: list[np.ndarray], T_mel) -> Tensor:
        """Ragged token lists; row b is interpolated to T_mel[b] frames and zero-padded to the max."""
        T_mel = np.asarray(T_mel)
        if np.any(T_mel < 1):
            raise ValueError("T_mel must be >= 1")
        lens = np.array([len(z) for z in z_s])
        if np.any(lens < 1):
            raise ValueError("need at least one semantic token")
        ids = np.zeros((len(z_s), lens.max()), dtype=np.int64)
        A = np.zeros((len(z_s), int(T_mel.max()), lens.max()), dtype=np.float32)
        for b, z in enumerate(z_s):
            ids[b, :lens[b]] = z
            A[b, :T_mel[b], :lens[b]] = ops.interp_matrix(int(lens[b]), int(T_mel[b]))
        return ops.matmul(Tensor(A), self.codebook(ids))

    def cnn(self, e: Tensor) -> Tensor:
        x = e
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.gelu(x)
        return x


def controlnet_inject(adapter_out: Tensor, block_input: Tensor) -> Tensor:
    if adapter_out.shape != block_input.shape:
        raise ShapeError(f"adapter output {adapter_out.shape} vs block input {block_input.shape}")
    return adapter_out + block_input


# ---------------------------------------------------------------- DiT

def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    B, _, D = x.shape
    return x * (ops.reshape(scale, (B, 1, D)) + 1.0) + ops.reshape(shift, (B, 1, D))


class AdaNorm(nn.Module):
    """Parameter-free layer norm modulated by (shift, scale) from the timestep embedding."""

    def __init__(self, dim: int):
        self.norm = nn.LayerNorm(dim, affine=False, eps=1e-6)

    def __call__(self, x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return modulate(self.norm(x), shift, scale)


class DitBlock(nn.Module):
    def __init__(self, cfg: DitConfig, rng: np.random.Generator):
        d = cfg.dim
        self.ada = nn.Linear(d, 9 * d, rng, zero=True)
        self.norm_sa = AdaNorm(d)
        self.self_attn = nn.Attention(d, cfg.heads, rng)
        self.norm_ca = AdaNorm(d)
        self.cross_attn = nn.Attention(d, cfg.heads, rng, kv_dim=cfg.cond_dim)
        self.norm_ff = AdaNorm(d)
        self.ffn = nn.FeedForward(d, cfg.ffn_inner, rng)
        self._dim = d

    def __call__(self, x: Tensor, temb: Tensor, kv: Tensor, x_mask=None, kv_mask=None,
                 q_pos=None, k_pos=None) -> Tensor:
        B, D = x.shape[0], self._dim
        mod = self.ada(ops.silu(temb))
        parts = [mod[:, i * D:(i + 1) * D] for i in range(9)]
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = parts

        def gate(g):
            return ops.reshape(g, (B, 1, D))
        h = self.self_attn(self.norm_sa(x, sh1, sc1), key_mask=x_mask, q_pos=q_pos, k_pos=q_pos)
        x = x + gate(g1) * h
        h = self.cross_attn(self.norm_ca(x, sh2, sc2), kv, key_mask=kv_mask, q_pos=q_pos, k_pos=k_pos)
        x = x + gate(g2) * h
        h = self.ffn(self.norm_ff(x, sh3, sc3))
        return x + gate(g3) * h


def shape_check_finite(x: Tensor, where: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"non-finite activations in {where}")
    return x


class FlowDecoder(nn.Module):
    """Velocity network v(m_t, t, e_s~, e_a~) plus its learned null conditions."""

    def __init__(self, cfg: DitConfig, n_semantic: int, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        self.adapter = SemanticAdapter(n_semantic, cfg.cond_dim, d, rng, cfg.adapter_layers)
        self.in_proj = nn.Linear(cfg.n_mels, d, rng)
        self.t_mlp1 = nn.Linear(d, d, rng)
        self.t_mlp2 = nn.Linear(d, d, rng)
        self.blocks = [DitBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.final_ada = nn.Linear(d, 2 * d, rng, zero=True)
        self.final_norm = AdaNorm(d)
        self.out = nn.Linear(d, cfg.n_mels, rng, zero=True)
        self.null_s = nn.param(rng.normal(0, 1, size=(cfg.cond_dim,)))
        self.null_a = nn.param(rng.normal(0, 1, size=(cfg.cond_dim,)) * 0.1)

    def t_embed(self, t) -> Tensor:
        e = Tensor(timestep_embedding(t, self.cfg.dim))
        return self.t_mlp2(ops.silu(self.t_mlp1(e)))

    def drop_conditions(self, e_s: Tensor, e_a: Tensor, drop: np.ndarray | None):
        """Replace both conditions of rows where ``drop`` is True by the null embeddings."""
        if drop is None or not np.any(drop):
            return e_s, e_a
        keep = (~np.asarray(drop, dtype=bool)).astype(e_s.data.dtype)[:, None, None]
        e_s = e_s * keep + ops.reshape(self.null_s, (1, 1, -1)) * (1.0 - keep)
        e_a = e_a * keep + ops.reshape(self.null_a, (1, 1, -1)) * (1.0 - keep)
        return e_s, e_a

    def __call__(self, m_t: Tensor, t, e_s: Tensor, e_a: Tensor, mask=None, kv_mask=None,
                 drop=None) -> Tensor:
        """m_t (B, T, n_mels), t (B,), e_s (B, T, cond), e_a (B, T_a, cond) -> velocity (B, T, n_mels)."""
        m_t = m_t if isinstance(m_t, Tensor) else Tensor(m_t)
        B, T, _ = m_t.shape
        if e_s.shape[:2] != (B, T):
            raise ShapeError(f"semantic condition {e_s.shape[:2]} vs mel {(B, T)}")
        e_s, e_a = self.drop_conditions(e_s, e_a, drop)
        control = self.adapter.cnn(e_s)
        temb = self.t_embed(t)
        q_pos = np.arange(T)
        k_pos = np.arange(e_a.shape[1])
        x = controlnet_inject(control, self.in_proj(m_t))
        for i, blk in enumerate(self.blocks):
            if i > 0:
                x = controlnet_inject(control, x)
            x = blk(x, temb, e_a, mask, kv_mask, q_pos, k_pos)
        fmod = self.final_ada(ops.silu(temb))
        d = self.cfg.dim
        x = self.final_norm(x, fmod[:, :d], fmod[:, d:])
        return shape_check_finite(self.out(x), "decoder output")

    def sample(self, e_s: Tensor, e_a: Tensor, steps: int = 32, omega: float = 2.0, seed: int = 0,
               mask=None, kv_mask=None, m0: np.ndarray | None = None) -> np.ndarray:
        """Euler integration of the guided velocity from noise at t=0 to t=1."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        B, T, _ = e_s.shape
        if m0 is None:
            m0 = np.random.default_rng(seed).standard_normal((B, T, self.cfg.n_mels))
        x = np.asarray(m0, dtype=np.float32).copy()
        dt = 1.0 / steps
        drop_all = np.ones(B, dtype=bool)
        with no_grad():
            for k in range(steps):
                t = np.full(B, k * dt)
                v_c = self(Tensor(x), t, e_s, e_a, mask, kv_mask).data
                if omega != 0.0:
                    v_u = self(Tensor(x), t, e_s, e_a, mask, kv_mask, drop=drop_all).data
                    v = cfg_velocity(v_c, v_u, omega)
                else:
                    v = v_c
                x = x + dt * v
        return x
