"""SEANet-style acoustic tokenizer: strided conv encoder over mel, FSQ, and a transposed-conv upsampler."""

from __future__ import annotations

import numpy as np

from . import nn
from .fsq import FSQ, FsqConfig
from .tensor import Tensor, ops

SCHEDULES = {25: [2, 2, 1], 50: [2, 1, 1]}


class AcousticEncoder(nn.Module):
    """Four conv stages (kernel 5, ELU); the last three carry the stride schedule."""

    def __init__(self, n_mels: int = 80, dims=(64, 128, 128, 128), rate: int = 25,
                 fsq: FsqConfig = FsqConfig(4, 8, 1), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if rate not in SCHEDULES:
            raise ValueError(f"acoustic rate must be one of {sorted(SCHEDULES)}")
        strides = [1] + SCHEDULES[rate]
        chans = [n_mels] + list(dims)
        self.convs = [nn.Conv1d(chans[i], chans[i + 1], 5, rng, stride=s) for i, s in enumerate(strides)]
        self.to_fsq = nn.Linear(dims[-1], fsq.channels, rng)
        self._strides = strides
        self._fsq = FSQ(fsq)
        self.rate = rate

    @property
    def factor(self) -> int:
        return int(np.prod(self._strides))

    @property
    def fsq(self) -> FSQ:
        return self._fsq

    def token_len(self, T_mel: int) -> int:
        return -(-T_mel // self.factor)

    def __call__(self, mel: Tensor, lengths=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """mel (B, T, n_mels) -> (quantized (B, T_a, C), codes (B, T_a, L), token lengths (B,))."""
        B, T, _ = mel.shape
        if T < 1:
            raise ValueError("empty mel")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        pad = self.token_len(T) * self.factor - T
        x = ops.pad_time(mel, 0, pad) if pad else mel
        n = lengths.copy()
        x = nn.apply_mask(x, nn.time_mask(n, x.shape[1]))
        for conv, s in zip(self.convs, self._strides):
            x = ops.elu(conv(x))
            n = -(-n // s)
            x = nn.apply_mask(x, nn.time_mask(n, x.shape[1]))
        q, codes = self._fsq(self.to_fsq(x))
        return q, codes, n


class AcousticUpsampler(nn.Module):
    """Learned codebook over FSQ grid vectors followed by four upsampling stages.

    The codebook is the linear map of the quantized grid vector, so a code id and
    its grid vector give the same embedding and the STE gradient reaches the encoder.
    """

    def __init__(self, fsq: FsqConfig = FsqConfig(4, 8, 1), dim: int = 128, rate: int = 25,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        ups = {25: [1, 2, 2], 50: [1, 1, 2]}[rate]
        self.codebook = nn.Linear(fsq.channels, dim, rng)
        self.conv_in = nn.Conv1d(dim, dim, 5, rng)
        self.stages = [nn.Conv1d(dim, dim, 3, rng) if u == 1 else nn.ConvTranspose1d(dim, dim, 2 * u, u, rng)
                       for u in ups]
        self._fsq = FSQ(fsq)
        self.factor = int(np.prod(ups))

    def embed(self, q: Tensor) -> Tensor:
        """e_a: codebook embedding of quantized vectors (B, T_a, C) -> (B, T_a, dim)."""
        return self.codebook(q)

    def embed_codes(self, codes) -> Tensor:
        return self.embed(Tensor(self._fsq.dequantize(codes)))

    def __call__(self, e_a: Tensor, T_mel: int, lengths=None) -> Tensor:
        """(B, T_a, dim) -> (B, T_mel, dim), trimmed or zero-padded at the end."""
        if T_mel < 1:
            raise ValueError("T_mel must be >= 1")
        if e_a.shape[1] < 1:
            raise ValueError("need at least one acoustic token")
        B, Ta, _ = e_a.shape
        n = np.full(B, Ta) if lengths is None else np.asarray(lengths)
        x = nn.apply_mask(e_a, nn.time_mask(n, Ta))
        x = ops.elu(self.conv_in(x))
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = ops.elu(x)
        T = x.shape[1]
        if T > T_mel:
            x = x[:, :T_mel]
        elif T < T_mel:
            x = ops.pad_time(x, 0, T_mel - T)
        return x
