"""Mel feature cache, normalisation statistics and padded batches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .signal import CorpusManifest, MelConfig, Utterance, stft_mel


@dataclass
class MelNorm:
    """Per-bin affine normalisation fitted on training mels."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, mels: list[np.ndarray]) -> MelNorm:
        allf = np.concatenate(mels, axis=0).astype(np.float64)
        return cls(allf.mean(axis=0).astype(np.float32), np.maximum(allf.std(axis=0), 1e-3).astype(np.float32))

    def __call__(self, mel: np.ndarray) -> np.ndarray:
        return ((mel - self.mean) / self.std).astype(np.float32)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return (x * self.std + self.mean).astype(np.float32)

    def arrays(self, prefix: str = "norm.") -> dict[str, np.ndarray]:
        return {prefix + "mean": self.mean, prefix + "std": self.std}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "norm.") -> MelNorm:
        return cls(arrays[prefix + "mean"], arrays[prefix + "std"])


def compute_mels(manifest: CorpusManifest, cfg: MelConfig = MelConfig()) -> dict[str, np.ndarray]:
    return {u.utt_id: stft_mel(manifest.load(u), cfg).frames for u in manifest.utterances}


def load_mels(manifest: CorpusManifest, cache: str | Path | None = None) -> dict[str, np.ndarray]:
    """Log-mels for every utterance, cached in a DSAT file next to the manifest."""
    if cache is None and manifest.root is not None:
        cache = Path(manifest.root) / "mels.dsat"
    if cache is not None and Path(cache).exists():
        arrays, meta = checkpoint.load(cache)
        if meta and meta.get("manifest_crc") == _manifest_crc(manifest):
            return arrays
    mels = compute_mels(manifest)
    if cache is not None:
        checkpoint.save(cache, mels, {"manifest_crc": _manifest_crc(manifest)})
    return mels


def _manifest_crc(manifest: CorpusManifest) -> int:
    import zlib
    return zlib.crc32(manifest.text().encode("utf-8"))


def pad_batch(mels: list[np.ndarray], multiple: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Stack (T_i, F) arrays into (B, T_max, F) with zeros after each sequence."""
    lengths = np.array([len(m) for m in mels])
    T = int(-(-lengths.max() // multiple) * multiple)
    out = np.zeros((len(mels), T, mels[0].shape[1]), dtype=np.float32)
    for i, m in enumerate(mels):
        out[i, :len(m)] = m
    return out, lengths


def pad_ids(seqs: list[np.ndarray], fill: int = 0) -> np.ndarray:
    T = max(len(s) for s in seqs)
    tail = np.asarray(seqs[0]).shape[1:]
    out = np.full((len(seqs), T) + tail, fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def batches(items: list, batch_size: int, rng: np.random.Generator | None = None,
            drop_last: bool = False) -> list[list]:
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    out = []
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        out.append([items[i] for i in idx])
    return out


def length_sorted_batches(utts: list[Utterance], lengths: dict[str, int], batch_size: int,
                          rng: np.random.Generator) -> list[list[Utterance]]:
    """Shuffle, group similar lengths into batches, then shuffle the batch order."""
    order = rng.permutation(len(utts))
    order = sorted(order, key=lambda i: lengths[utts[i].utt_id])
    groups = [[utts[i] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]
    return [groups[i] for i in rng.permutation(len(groups))]
