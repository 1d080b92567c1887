"""WAV I/O, log-mel analysis and Griffin-Lim resynthesis."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 512
    win_length: int = 400
    hop_length: int = 160
    n_mels: int = 80
    fmin: float = 40.0
    fmax: float = 7600.0
    floor: float = 1e-5

    def __post_init__(self):
        if not self.n_fft >= self.win_length >= self.hop_length > 0:
            raise ValueError("need n_fft >= win_length >= hop_length > 0")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def pad(self) -> int:
        # centres frame t on sample t*hop + hop/2
        return (self.win_length - self.hop_length) // 2

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples + 2 * self.pad - self.win_length) // self.hop_length


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono")
        if np.abs(self.samples).max(initial=0.0) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class MelSpec:
    frames: np.ndarray  # (T_mel, n_mels) natural-log energies
    frame_rate: float = 100.0

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------- WAV

def write_wav(path: str | Path, wave_: Waveform) -> None:
    """16-bit PCM mono."""
    pcm = np.round(np.clip(wave_.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(wave_.sample_rate))
        f.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32767.0, sr)


def quantize_pcm(samples: np.ndarray) -> np.ndarray:
    """Samples as they come back from a write/read round-trip."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    return pcm.astype(np.float32) / 32767.0


# ---------------------------------------------------------------- mel analysis

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank(cfg: MelConfig) -> tuple[np.ndarray, np.ndarray]:
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (centre - lo)
    down = (hi - freqs[None, :]) / (hi - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32), edges[1:-1]


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """(n_mels, n_fft//2+1) unit-peak triangles; per-bin column sums are <= 1."""
    return _filterbank(cfg)[0]


def mel_centres(cfg: MelConfig = MelConfig()) -> np.ndarray:
    return _filterbank(cfg)[1]


@lru_cache(maxsize=8)
def _window(win_length: int, n_fft: int) -> np.ndarray:
    w = np.hanning(win_length + 1)[:-1]  # periodic Hann
    out = np.zeros(n_fft)
    out[:win_length] = w
    return out


def stft(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Complex STFT, (T, n_fft//2+1)."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < cfg.win_length:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one window")
    xp = np.pad(x, (cfg.pad, cfg.pad), mode="reflect")
    T = cfg.n_frames(len(x))
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(T)[:, None]
    frames = np.zeros((T, cfg.n_fft))
    frames[:, :cfg.win_length] = xp[idx]
    return np.fft.rfft(frames * _window(cfg.win_length, cfg.n_fft)[None, :], axis=1)


def _reflect_index(n: int, pad: int, total: int) -> np.ndarray:
    """Source sample for each position of the reflect-padded signal."""
    i = np.arange(total) - pad
    i = np.abs(i)
    return np.where(i > n - 1, 2 * (n - 1) - i, i)


def istft(spec: np.ndarray, cfg: MelConfig, length: int) -> np.ndarray:
    """Least-squares inverse of ``stft``, reflect padding included.

    Overlap-added frames and squared-window weights are both folded back
    through the padding map, so edge frames constrain the samples they were
    actually computed from.
    """
    T = spec.shape[0]
    win = _window(cfg.win_length, cfg.n_fft)[:cfg.win_length]
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :cfg.win_length] * win[None, :]
    total = cfg.hop_length * (T - 1) + cfg.win_length
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(T)[:, None]
    src = _reflect_index(length, cfg.pad, total)[idx].reshape(-1)
    out = np.bincount(src, weights=frames.reshape(-1), minlength=length)
    norm = np.bincount(src, weights=np.broadcast_to(win * win, idx.shape).reshape(-1), minlength=length)
    return out / np.maximum(norm, 1e-8)


def power_to_logmel(power: np.ndarray, cfg: MelConfig) -> np.ndarray:
    mel = power @ mel_filterbank(cfg).T.astype(np.float64)
    return np.log(np.maximum(mel, cfg.floor)).astype(np.float32)


def stft_mel(wave_: Waveform | np.ndarray, cfg: MelConfig = MelConfig()) -> MelSpec:
    """Natural-log mel energies clamped at ``cfg.floor``; T = floor(len / hop) for the default config."""
    samples = wave_.samples if isinstance(wave_, Waveform) else np.asarray(wave_)
    if samples.size == 0:
        raise ValueError("empty waveform")
    spec = stft(samples, cfg)
    return MelSpec(power_to_logmel(np.abs(spec) ** 2, cfg), cfg.frame_rate)


# ---------------------------------------------------------------- inversion

def mel_to_linear(mel: MelSpec | np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Per-frame non-negative least squares for linear power given log-mel energies."""
    frames = mel.frames if isinstance(mel, MelSpec) else np.asarray(mel)
    fb = mel_filterbank(cfg).astype(np.float64)
    energy = np.maximum(np.exp(frames.astype(np.float64)) - cfg.floor, 0.0)
    out = np.zeros((frames.shape[0], fb.shape[1]))
    for t in range(frames.shape[0]):
        if energy[t].max() <= 0.0:
            continue
        out[t], _ = nnls(fb, energy[t])
    return out


def griffin_lim(mel: MelSpec | np.ndarray, cfg: MelConfig = MelConfig(), iters: int = 32,
                seed: int = 0, momentum: float = 0.99, return_history: bool = False):
    """Estimate a waveform whose log-mel matches ``mel`` by alternating projections.

    ``momentum`` > 0 gives the accelerated variant (extrapolate the consistent
    spectrogram before taking its phase); 0 is the classic iteration.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    frames = mel.frames if isinstance(mel, MelSpec) else np.asarray(mel)
    mag = np.sqrt(mel_to_linear(frames, cfg))
    length = frames.shape[0] * cfg.hop_length
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    history = []
    x = istft(mag * phase, cfg, length)
    prev = np.zeros_like(phase)
    for _ in range(iters):
        if return_history:
            history.append(x)
        rebuilt = stft(x, cfg)
        accel = rebuilt + momentum * (rebuilt - prev)
        prev = rebuilt
        x = istft(mag * np.exp(1j * np.angle(accel)), cfg, length)
    peak = np.abs(x).max(initial=0.0)
    if peak > 1.0:
        x = x / peak
    out = Waveform(x.astype(np.float32), cfg.sample_rate)
    if return_history:
        history.append(x)
        return out, history
    return out
