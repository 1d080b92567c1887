"""Parametric synthetic speech with exact content and style labels.

Content is a sequence of symbols; each symbol owns a two-resonance spectral
envelope. Style (pitch, vibrato, spectral tilt, loudness) belongs to the
speaker. A symbol becomes one 0.12-0.30 s segment of a harmonic source with
short onset/offset ramps, so repeated symbols stay separable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform, quantize_pcm, read_wav, write_wav

MAX_CONTENT = 12
SEG_MIN_S, SEG_MAX_S = 0.12, 0.30
RAMP_S = 0.015
NOISE_DB = -40.0


@dataclass(frozen=True)
class StyleParams:
    speaker_id: int
    f0_base: float
    spectral_tilt: float
    vibrato_rate: float
    vibrato_depth: float
    amplitude: float

    def __post_init__(self):
        if not 90.0 <= self.f0_base <= 300.0:
            raise ValueError(f"f0_base {self.f0_base} outside [90, 300]")
        if not 0.0 < self.amplitude <= 1.0:
            raise ValueError("amplitude must be in (0, 1]")

    def to_field(self) -> str:
        return (f"f0:{self.f0_base:.1f},tilt:{self.spectral_tilt:.1f},vrate:{self.vibrato_rate:.1f},"
                f"vdepth:{self.vibrato_depth:.1f},amp:{self.amplitude:.2f}")

    @classmethod
    def from_field(cls, speaker_id: int, field: str) -> StyleParams:
        kv = dict(item.split(":", 1) for item in field.split(","))
        return cls(speaker_id, float(kv["f0"]), float(kv["tilt"]), float(kv["vrate"]),
                   float(kv["vdepth"]), float(kv["amp"]))


def sample_style(speaker_id: int, rng: np.random.Generator) -> StyleParams:
    """Draw one speaker; values are rounded to the manifest's printed precision."""
    return StyleParams(
        speaker_id=speaker_id,
        f0_base=round(float(np.exp(rng.uniform(np.log(90.0), np.log(300.0)))), 1),
        spectral_tilt=round(float(rng.uniform(-9.0, -1.0)), 1),
        vibrato_rate=round(float(rng.uniform(4.0, 7.0)), 1),
        vibrato_depth=round(float(rng.uniform(10.0, 60.0)), 1),
        amplitude=round(float(rng.uniform(0.3, 0.9)), 2),
    )


def symbol_formants(K: int) -> np.ndarray:
    """(K, 2) resonance centres in Hz; a fixed grid shared by every corpus with this K."""
    f1 = np.linspace(300.0, 900.0, 4)
    f2 = np.linspace(1000.0, 2600.0, int(np.ceil(K / 4)))
    grid = np.array([(a, b) for b in f2 for a in f1])
    return grid[:K]


FORMANT_BW = (90.0, 140.0)


def _envelope(freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
    env = 0.03 * np.ones_like(freqs)
    for centre, bw in zip(formants, FORMANT_BW):
        env += 1.0 / (1.0 + ((freqs - centre) / bw) ** 2)
    return env


def synth_utterance(content, style: StyleParams, seed: int, K: int = 16,
                    sample_rate: int = SAMPLE_RATE) -> Waveform:
    content = [int(c) for c in content]
    if not 1 <= len(content) <= MAX_CONTENT:
        raise ValueError(f"content length {len(content)} outside [1, {MAX_CONTENT}]")
    if any(c < 0 or c >= K for c in content):
        raise ValueError(f"unknown symbol in {content} for alphabet of {K}")
    rng = np.random.default_rng(seed)
    durs = rng.uniform(SEG_MIN_S, SEG_MAX_S, size=len(content))
    seg_len = np.round(durs * sample_rate).astype(int)
    n = int(seg_len.sum())
    t = np.arange(n) / sample_rate

    vib_phase = rng.uniform(0, 2 * np.pi)
    cents = style.vibrato_depth * np.sin(2 * np.pi * style.vibrato_rate * t + vib_phase)
    f0 = style.f0_base * 2.0 ** (cents / 1200.0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_harm = int((sample_rate / 2 - 100) // style.f0_base)
    h = np.arange(1, n_harm + 1)[:, None]
    formants = symbol_formants(K)
    ramp = int(RAMP_S * sample_rate)
    out = np.zeros(n)
    start = 0
    for sym, L in zip(content, seg_len):
        sl = slice(start, start + L)
        hf = h * f0[None, sl]
        amp = _envelope(hf, formants[sym])
        amp *= 10.0 ** (style.spectral_tilt * np.log2(hf / 100.0) / 20.0)
        amp[hf >= sample_rate / 2 - 100] = 0.0
        seg = (amp * np.sin(h * phase[None, sl])).sum(axis=0)
        w = np.ones(L)
        r = min(ramp, L // 2)
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        w[:r] = edge
        w[L - r:] = edge[::-1]
        out[sl] = seg * w
        start += L

    rms = np.sqrt(np.mean(out ** 2))
    out = out + rng.normal(0.0, rms * 10 ** (NOISE_DB / 20), size=n)
    out *= style.amplitude / np.abs(out).max()
    return Waveform(out.astype(np.float32), sample_rate)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class Utterance:
    utt_id: str
    wav_path: str
    content: tuple[int, ...]
    style: StyleParams

    @property
    def speaker_id(self) -> int:
        return self.style.speaker_id

    def to_line(self) -> str:
        content = ",".join(str(c) for c in self.content)
        return (f"{self.utt_id}\t{self.wav_path}\tcontent:{content}\tspeaker:{self.style.speaker_id}"
                f"\t{self.style.to_field()}")

    @classmethod
    def from_line(cls, line: str) -> Utterance:
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5 or not parts[2].startswith("content:") or not parts[3].startswith("speaker:"):
            raise ValueError(f"malformed manifest line: {line!r}")
        content = tuple(int(c) for c in parts[2][len("content:"):].split(","))
        spk = int(parts[3][len("speaker:"):])
        return cls(parts[0], parts[1], content, StyleParams.from_field(spk, parts[4]))


@dataclass
class CorpusManifest:
    utterances: list[Utterance]
    K: int = 16
    seed: int = 0
    root: Path | None = None

    def __post_init__(self):
        ids = [u.utt_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utt_id in manifest")
        for u in self.utterances:
            if any(c < 0 or c >= self.K for c in u.content):
                raise ValueError(f"{u.utt_id}: symbol outside alphabet of {self.K}")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def by_id(self) -> dict[str, Utterance]:
        return {u.utt_id: u for u in self.utterances}

    def speakers(self) -> list[int]:
        return sorted({u.speaker_id for u in self.utterances})

    def utt_seed(self, index: int) -> int:
        return utterance_seed(self.seed, index)

    def wav_file(self, utt: Utterance) -> Path:
        p = Path(utt.wav_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, utt: Utterance) -> Waveform:
        return read_wav(self.wav_file(utt))

    def resynthesize(self, index: int) -> Waveform:
        u = self.utterances[index]
        w = synth_utterance(u.content, u.style, self.utt_seed(index), K=self.K)
        return Waveform(quantize_pcm(w.samples), w.sample_rate)

    def text(self) -> str:
        lines = [f"# K={self.K} seed={self.seed}"]
        lines += [u.to_line() for u in self.utterances]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.text(), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path: str | Path) -> CorpusManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.tsv"
        K, seed, utts = 16, 0, []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "K":
                        K = int(val)
                    elif key == "seed":
                        seed = int(val)
                continue
            utts.append(Utterance.from_line(line))
        return cls(utts, K=K, seed=seed, root=path.parent)


def utterance_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def plan_corpus(n_speakers: int = 32, utts_per_speaker: int = 100, K: int = 16,
                seed: int = 0) -> CorpusManifest:
    """Sample styles and content sequences without rendering audio."""
    rng = np.random.default_rng(seed)
    styles = [sample_style(s, rng) for s in range(n_speakers)]
    utts = []
    for s, style in enumerate(styles):
        for u in range(utts_per_speaker):
            length = int(rng.integers(3, 11))
            content = tuple(int(c) for c in rng.integers(0, K, size=length))
            utt_id = f"spk{s:03d}_u{u:04d}"
            utts.append(Utterance(utt_id, f"wav/{utt_id}.wav", content, style))
    return CorpusManifest(utts, K=K, seed=seed)


def build_corpus(out_dir: str | Path, n_speakers: int = 32, utts_per_speaker: int = 100,
                 K: int = 16, seed: int = 0) -> CorpusManifest:
    """Render every utterance to ``out_dir/wav`` and write ``out_dir/manifest.tsv``."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    manifest = plan_corpus(n_speakers, utts_per_speaker, K, seed)
    manifest.root = out_dir
    for i, u in enumerate(manifest.utterances):
        w = synth_utterance(u.content, u.style, manifest.utt_seed(i), K=K)
        write_wav(out_dir / u.wav_path, w)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def split_by_speaker(manifest: CorpusManifest, n_val: int = 10, n_test: int = 10):
    """Per speaker: the last ``n_test`` utterances are test, the ``n_val`` before them validation."""
    train, val, test = [], [], []
    per: dict[int, list[Utterance]] = {}
    for u in manifest.utterances:
        per.setdefault(u.speaker_id, []).append(u)
    for spk in sorted(per):
        us = per[spk]
        cut_t = len(us) - n_test
        cut_v = cut_t - n_val
        if cut_v < 1:
            raise ValueError(f"speaker {spk} has too few utterances for the split")
        train += us[:cut_v]
        val += us[cut_v:cut_t]
        test += us[cut_t:]
    return train, val, test
