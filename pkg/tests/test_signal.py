import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsatok.signal import (CorpusManifest, MelConfig, StyleParams, Utterance, Waveform, build_corpus,
                           griffin_lim, mel_centres, mel_filterbank, plan_corpus, read_wav, split_by_speaker,
                           stft_mel, synth_utterance)
from dsatok.signal.audio import istft, stft

CFG = MelConfig()


def tone(freq=440.0, dur=1.0, amp=0.5, fade=0.0):
    t = np.arange(int(dur * 16000)) / 16000
    x = amp * np.sin(2 * np.pi * freq * t)
    if fade:
        x *= np.minimum(1.0, np.minimum(t, t[::-1]) / fade)
    return x.astype(np.float32)


def autocorr_pitch(x, sr=16000, fmin=60, fmax=500):
    x = x - x.mean()
    r = np.correlate(x, x, mode="full")[len(x) - 1:]
    lo, hi = int(sr / fmax), int(sr / fmin)
    return sr / (lo + np.argmax(r[lo:hi]))


def test_silence_is_floor():
    m = stft_mel(np.zeros(4000, dtype=np.float32))
    assert np.all(m.frames == np.float32(np.log(1e-5)))


def test_tone_peaks_at_nearest_filter():
    m = stft_mel(tone())
    expect = int(np.argmin(np.abs(mel_centres() - 440.0)))
    assert np.all(m.frames[2:-2].argmax(axis=1) == expect)


def test_one_second_is_100_frames():
    m = stft_mel(tone(dur=1.0))
    assert len(m) == 100 and m.frame_rate == 100.0 and m.n_mels == 80


@given(st.integers(min_value=400, max_value=6000))
@settings(max_examples=40, deadline=None)
def test_frame_count_formula(n):
    m = stft_mel(np.zeros(n, dtype=np.float32))
    assert len(m) == 1 + (n + 2 * CFG.pad - CFG.win_length) // CFG.hop_length


def test_too_short_raises():
    with pytest.raises(ValueError):
        stft_mel(np.zeros(100, dtype=np.float32))


def test_filterbank_normalization():
    fb = mel_filterbank()
    assert fb.min() >= 0.0
    assert fb.sum(axis=0).max() <= 1.0 + 1e-6


def test_stft_istft_roundtrip():
    x = np.random.default_rng(0).normal(0, 0.1, 5000)
    np.testing.assert_allclose(istft(stft(x, CFG), CFG, len(x)), x, atol=1e-10)


def test_griffin_lim_reduces_error():
    m = stft_mel(tone(fade=0.02))
    _, hist = griffin_lim(m, iters=32, return_history=True)
    err = [np.linalg.norm(stft_mel(h.astype(np.float32)).frames - m.frames) for h in hist]
    assert err[-1] < 0.5 * err[0]


def test_griffin_lim_silence_and_determinism():
    sil = stft_mel(np.zeros(8000, dtype=np.float32))
    w = griffin_lim(sil, iters=4)
    assert np.sqrt(np.mean(w.samples ** 2)) < 1e-3
    m = stft_mel(tone(dur=0.3))
    a, b = griffin_lim(m, iters=3, seed=5), griffin_lim(m, iters=3, seed=5)
    assert np.array_equal(a.samples, b.samples)
    with pytest.raises(ValueError):
        griffin_lim(m, iters=0)


STYLE = StyleParams(0, 150.0, -4.0, 5.0, 20.0, 0.8)


def test_synth_deterministic_and_bounded():
    a = synth_utterance([3, 7, 1], STYLE, seed=11)
    b = synth_utterance([3, 7, 1], STYLE, seed=11)
    assert np.array_equal(a.samples, b.samples)
    assert np.abs(a.samples).max() <= 1.0
    assert 3 * 0.12 * 16000 <= len(a) <= 3 * 0.30 * 16000 + 3


def test_synth_pitch_follows_style():
    lo = synth_utterance([2, 5, 9], StyleParams(0, 90.0, -4.0, 5.0, 20.0, 0.8), seed=1)
    hi = synth_utterance([2, 5, 9], StyleParams(1, 300.0, -4.0, 5.0, 20.0, 0.8), seed=1)
    p_lo, p_hi = autocorr_pitch(lo.samples), autocorr_pitch(hi.samples)
    assert p_hi / p_lo > 2.0


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_utterance([], STYLE, 0)
    with pytest.raises(ValueError):
        synth_utterance([16], STYLE, 0)
    with pytest.raises(ValueError):
        synth_utterance([0] * 13, STYLE, 0)
    with pytest.raises(ValueError):
        StyleParams(0, 400.0, -4.0, 5.0, 20.0, 0.8)


def test_symbols_have_distinct_spectra():
    # mean log-mel of each symbol, same style: nearest-centroid must recover the symbol
    means = []
    for k in range(16):
        m = stft_mel(synth_utterance([k], STYLE, seed=k)).frames
        means.append(m[5:-5].mean(axis=0))
    means = np.array(means)
    d = ((means[:, None] - means[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1.0


def test_manifest_line_roundtrip():
    u = Utterance("spk012_u0003", "wav/x.wav", (3, 7, 1), StyleParams(12, 147.3, -4.2, 5.1, 28.0, 0.82))
    line = u.to_line()
    assert line == "spk012_u0003\twav/x.wav\tcontent:3,7,1\tspeaker:12\tf0:147.3,tilt:-4.2,vrate:5.1,vdepth:28.0,amp:0.82"
    assert Utterance.from_line(line) == u
    with pytest.raises(ValueError):
        Utterance.from_line("a\tb\tc")


def test_plan_defaults_and_determinism():
    m = plan_corpus(seed=3)
    assert len(m) == 3200 and len(m.speakers()) == 32
    assert all(3 <= len(u.content) <= 10 for u in m)
    assert plan_corpus(seed=3).text() == m.text()
    f0 = [u.style.f0_base for u in m.utterances[::100]]
    assert len(set(f0)) == 32
    train, val, test = split_by_speaker(m)
    assert (len(train), len(val), len(test)) == (2560, 320, 320)


def test_manifest_rejects_duplicates_and_bad_symbols():
    u = Utterance("a", "a.wav", (1,), STYLE)
    with pytest.raises(ValueError):
        CorpusManifest([u, u])
    with pytest.raises(ValueError):
        CorpusManifest([Utterance("b", "b.wav", (20,), STYLE)], K=16)


def test_build_corpus_resynthesis_bit_exact(tmp_path):
    m = build_corpus(tmp_path / "a", n_speakers=2, utts_per_speaker=3, seed=7)
    build_corpus(tmp_path / "b", n_speakers=2, utts_per_speaker=3, seed=7)
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    back = CorpusManifest.read(tmp_path / "a")
    assert back.text() == m.text()
    for i, u in enumerate(back):
        stored = read_wav(back.wav_file(u))
        assert stored.sample_rate == 16000
        assert np.array_equal(stored.samples, back.resynthesize(i).samples)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 1.5]))
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 3)))
