"""Finite scalar quantization with a straight-through gradient.

Each channel is squashed by tanh and snapped to the N-point grid
``(2k - (N-1)) / (N-1)``. Codes are the per-channel level indices, flattened
mixed-radix with channel 0 least significant. Stacked layers quantize the
residual left by the layers before them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ops


@dataclass(frozen=True)
class FsqConfig:
    levels: int = 4
    channels: int = 5
    layers: int = 1

    def __post_init__(self):
        if self.levels < 2 or self.channels < 1 or self.layers < 1:
            raise ValueError(f"invalid FSQ config {self}")

    @property
    def codebook_size(self) -> int:
        return self.levels ** self.channels

    @property
    def half_step(self) -> float:
        return 1.0 / (self.levels - 1)


def grid(levels: int) -> np.ndarray:
    k = np.arange(levels)
    return (2 * k - (levels - 1)) / (levels - 1)


def snap_levels(y: np.ndarray, levels: int) -> np.ndarray:
    """Nearest grid level for values in [-1, 1]; exact midpoints go to the lower index."""
    u = (np.asarray(y, dtype=np.float64) + 1.0) * (levels - 1) / 2.0
    k = np.ceil(u - 0.5)
    return np.clip(k, 0, levels - 1).astype(np.int64)


def level_values(k: np.ndarray, levels: int, dtype=np.float32) -> np.ndarray:
    return ((2 * k - (levels - 1)) / (levels - 1)).astype(dtype)


def flatten_levels(k: np.ndarray, levels: int) -> np.ndarray:
    """(..., C) level indices -> (...) flat index sum_c k_c N^c."""
    radix = levels ** np.arange(k.shape[-1], dtype=np.int64)
    return (k.astype(np.int64) * radix).sum(axis=-1)


def unflatten_index(idx, levels: int, channels: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= levels ** channels):
        raise IndexError(f"code index outside [0, {levels ** channels - 1}]")
    radix = levels ** np.arange(channels, dtype=np.int64)
    return (idx[..., None] // radix) % levels


def snap_ste(y: Tensor, levels: int) -> tuple[Tensor, np.ndarray]:
    """Grid snap whose backward is the identity."""
    k = snap_levels(y.data, levels)
    q = level_values(k, levels, y.data.dtype)
    return Tensor.from_op(q, (y,), lambda g: (g,), "fsq_ste"), k


class FSQ:
    """Parameter-free quantizer; see module docstring."""

    def __init__(self, cfg: FsqConfig):
        self.cfg = cfg

    def __call__(self, pre: Tensor) -> tuple[Tensor, np.ndarray]:
        return self.quantize(pre)

    def quantize(self, pre: Tensor) -> tuple[Tensor, np.ndarray]:
        """Returns the summed quantized vector (..., C) and flat codes (..., L)."""
        cfg = self.cfg
        if pre.shape[-1] != cfg.channels:
            raise ValueError(f"expected {cfg.channels} channels, got {pre.shape[-1]}")
        if not np.isfinite(pre.data).all():
            raise ValueError("FSQ input must be finite")
        total, codes = None, []
        residual = pre
        scale = 1.0
        for layer in range(cfg.layers):
            # layer 0 bounds the pre-activation; later layers bound the residual
            # magnified to the full grid range, then shrink it back
            y = ops.tanh(residual if layer == 0 else residual * (1.0 / scale))
            q, k = snap_ste(y, cfg.levels)
            q = q if layer == 0 else q * scale
            codes.append(flatten_levels(k, cfg.levels))
            if layer == 0:
                # the residual is measured against the bounded value
                residual = y - q
            else:
                residual = residual - q
            total = q if total is None else total + q
            scale *= cfg.half_step
        return total, np.stack(codes, axis=-1)

    def dequantize(self, codes) -> np.ndarray:
        """(..., L) flat codes -> (..., C) summed grid vectors."""
        cfg = self.cfg
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 0 or codes.shape[-1] != cfg.layers:
            codes = codes[..., None] if cfg.layers == 1 else codes
        if codes.shape[-1] != cfg.layers:
            raise ValueError(f"expected {cfg.layers} codes per position")
        out = 0.0
        scale = 1.0
        for layer in range(cfg.layers):
            k = unflatten_index(codes[..., layer], cfg.levels, cfg.channels)
            out = out + scale * level_values(k, cfg.levels, np.float64)
            scale *= cfg.half_step
        return np.asarray(out, dtype=np.float32)

    def codes_of(self, values: np.ndarray) -> np.ndarray:
        """Flat index of on-grid single-layer vectors (no tanh)."""
        return flatten_levels(snap_levels(values, self.cfg.levels), self.cfg.levels)
