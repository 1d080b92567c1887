"""CTC-supervised semantic tokenizer: conv front-end, two transformer layers, FSQ.

The front-end removes each utterance's per-bin mean (and so any constant
spectral tilt or gain) before a 4x temporal downsample to 25 Hz. The CTC head
reads only the quantized code of each frame and is dropped once training ends.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .ctc import ctc_loss, greedy_decode
from .fsq import FSQ, FsqConfig
from .tensor import Tensor, no_grad, ops

SEMANTIC_FSQ = FsqConfig(4, 5, 1)


def utterance_cmvn(mel: np.ndarray, lengths) -> np.ndarray:
    """Subtract each utterance's per-bin mean over its valid frames; padding stays zero."""
    B, T, _ = mel.shape
    mask = nn.time_mask(lengths, T)[:, :, None]
    mean = (mel * mask).sum(axis=1, keepdims=True) / np.asarray(lengths).reshape(B, 1, 1)
    return ((mel - mean) * mask).astype(np.float32)


class SemanticEncoder(nn.Module):
    def __init__(self, K: int = 16, n_mels: int = 80, dim: int = 128, heads: int = 4, inner: int = 512,
                 fsq: FsqConfig = SEMANTIC_FSQ, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.conv1 = nn.Conv1d(n_mels, dim, 5, rng, stride=2)
        self.conv2 = nn.Conv1d(dim, dim, 5, rng, stride=2)
        self.layers = [nn.TransformerLayer(dim, heads, inner, rng) for _ in range(2)]
        self.norm = nn.LayerNorm(dim)
        self.to_fsq = nn.Linear(dim, fsq.channels, rng)
        self.head = CtcHead(fsq.channels, K, rng)
        self._fsq = FSQ(fsq)
        self.K = K

    @property
    def fsq(self) -> FSQ:
        return self._fsq

    @staticmethod
    def token_len(T_mel) -> np.ndarray:
        return np.asarray(T_mel) // 4

    def __call__(self, mel: np.ndarray, lengths=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Normalised mel (B, T, n_mels) -> (quantized (B, T_s, C), codes (B, T_s), T_s per row)."""
        mel = np.asarray(mel, dtype=np.float32)
        B, T, _ = mel.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        n = self.token_len(lengths)
        if np.any(n < 1):
            raise ValueError("input shorter than one 25 Hz frame (4 mel frames)")
        T4 = 4 * int(n.max())
        x = utterance_cmvn(mel[:, :T4], 4 * n)  # each row uses exactly its 4 * T_s frames
        x = ops.gelu(self.conv1(Tensor(x)))
        x = nn.apply_mask(x, nn.time_mask(2 * n, x.shape[1]))
        x = ops.gelu(self.conv2(x))
        mask = nn.time_mask(n, x.shape[1])
        x = nn.apply_mask(x, mask)
        for layer in self.layers:
            x = layer(x, key_mask=mask)
        q, codes = self._fsq(self.to_fsq(self.norm(x)))
        return q, codes[..., 0], n

    def encode(self, mel: np.ndarray, lengths=None) -> list[np.ndarray]:
        """Token ids per utterance (length floor(T_mel / 4) each)."""
        with no_grad():
            _, codes, n = self(mel, lengths)
        return [codes[b, :n[b]].astype(np.int64) for b in range(len(n))]


class CtcHead(nn.Module):
    """Frame-wise MLP from a quantized code to K symbols + blank (blank = K).

    Codes live in [-1, 1] per channel; a fixed input gain lets the head form
    confident posteriors early. Without it training sits on the all-blank
    plateau for thousands of steps.
    """

    IN_GAIN = 4.0

    def __init__(self, d_in: int, K: int, rng: np.random.Generator, hidden: int = 128):
        self.fc1 = nn.Linear(d_in, hidden, rng)
        self.fc2 = nn.Linear(hidden, K + 1, rng)

    def __call__(self, q: Tensor) -> Tensor:
        return ops.log_softmax(self.fc2(ops.gelu(self.fc1(q * self.IN_GAIN))), axis=-1)


def semantic_loss(enc: SemanticEncoder, mel: np.ndarray, lengths, targets) -> Tensor:
    q, _, n = enc(mel, lengths)
    return ctc_loss(enc.head(q), targets, lengths=n, blank=enc.K)


def decode_symbols(enc: SemanticEncoder, mel: np.ndarray, lengths) -> list[list[int]]:
    with no_grad():
        q, _, n = enc(mel, lengths)
        lp = enc.head(q).data
    return [greedy_decode(lp[b], blank=enc.K, length=int(n[b])) for b in range(len(n))]
