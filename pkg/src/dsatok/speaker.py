"""Attentive statistics pooling, the speaker-consistency loss, and the reference style encoder."""

from __future__ import annotations

import numpy as np

from . import nn
from .tensor import Tensor, ops

ASP_EPS = 1e-5


class AttnPool(nn.Module):
    """Masked channel-wise attentive statistics pooling followed by a projection.

    Scores S = W2 tanh(W1 X + b1) + b2 get a per-channel softmax over valid
    frames; the weighted mean and standard deviation are concatenated and
    projected to ``d_out``.
    """

    def __init__(self, dim: int = 128, d_attn: int = 128, d_out: int = 256,
                 rng: np.random.Generator | None = None, eps: float = ASP_EPS):
        rng = rng or np.random.default_rng(0)
        self.w1 = nn.Linear(dim, d_attn, rng)
        self.w2 = nn.Linear(d_attn, dim, rng)
        self.proj = nn.Linear(2 * dim, d_out, rng)
        self._eps = eps

    def stats(self, x: Tensor, lengths=None) -> tuple[Tensor, Tensor]:
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        if np.any(lengths < 1) or np.any(lengths > T):
            raise ValueError("valid length must be in [1, T]")
        mask = nn.time_mask(lengths, T)[:, :, None]
        s = self.w2(ops.tanh(self.w1(x)))
        alpha = ops.softmax(s, axis=1, mask=mask)
        mu = ops.sum(alpha * x, axis=1)
        dev = x - ops.reshape(mu, (B, 1, -1))
        var = ops.sum(alpha * dev * dev, axis=1)
        sigma = ops.sqrt(var + self._eps)
        return mu, sigma

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        mu, sigma = self.stats(x, lengths)
        return self.proj(ops.concat([mu, sigma], axis=-1))


def speaker_loss(s_ref: Tensor, h: Tensor) -> Tensor:
    """Mean over the batch of 1 - cos(s_ref, h)."""
    s_ref = s_ref if isinstance(s_ref, Tensor) else Tensor(s_ref)
    return ops.mean(1.0 - ops.cosine(s_ref, h, axis=-1))


# ---------------------------------------------------------------- reference encoder

class RefStyleEncoder(nn.Module):
    """Speaker classifier over mel whose normalised penultimate layer is the style vector.

    Trained with a scaled cosine classifier so that speakers separate by angle,
    then frozen and used only as a fixed target for the speaker loss and for
    style-similarity evaluation.
    """

    def __init__(self, n_mels: int = 80, n_speakers: int = 32, dim: int = 256,
                 rng: np.random.Generator | None = None, scale: float = 16.0):
        rng = rng or np.random.default_rng(0)
        self.conv1 = nn.Conv1d(n_mels, 128, 5, rng)
        self.conv2 = nn.Conv1d(128, 128, 5, rng, stride=2)
        self.conv3 = nn.Conv1d(128, 128, 5, rng, stride=2)
        self.proj = nn.Linear(256, dim, rng)
        self.classes = nn.param(rng.normal(0, 1, size=(n_speakers, dim)))
        self._scale = scale
        self.trained = False

    def embed(self, mel: Tensor, lengths=None) -> Tensor:
        """(B, T, n_mels) normalised mel -> (B, dim) unit vectors."""
        B, T, _ = mel.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        x, n = nn.apply_mask(mel, nn.time_mask(lengths, T)), lengths
        for conv in (self.conv1, self.conv2, self.conv3):
            x = ops.elu(conv(x))
            n = (n + conv._stride - 1) // conv._stride
            x = nn.apply_mask(x, nn.time_mask(n, x.shape[1]))
        w = (nn.time_mask(n, x.shape[1]) / n[:, None]).astype(x.data.dtype)[:, :, None]
        mu = ops.sum(x * w, axis=1)
        dev = x - ops.reshape(mu, (B, 1, -1))
        sd = ops.sqrt(ops.sum(dev * dev * w, axis=1) + 1e-5)
        e = self.proj(ops.concat([mu, sd], axis=-1))
        norm = ops.sqrt(ops.sum(e * e, axis=-1, keepdims=True) + 1e-12)
        return e / norm

    def logits(self, emb: Tensor) -> Tensor:
        c = self.classes
        cn = c / ops.sqrt(ops.sum(c * c, axis=-1, keepdims=True) + 1e-12)
        return ops.matmul(emb, ops.transpose(cn, (1, 0))) * self._scale

    def __call__(self, mel: Tensor, lengths=None) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("reference style encoder has not been trained")
        from .tensor import no_grad
        with no_grad():
            return self.embed(mel, lengths).data
