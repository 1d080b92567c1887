from .audio import (SAMPLE_RATE, MelConfig, MelSpec, Waveform, griffin_lim, mel_centres, mel_filterbank,
                    mel_to_linear, quantize_pcm, read_wav, stft_mel, write_wav)
from .corpus import (CorpusManifest, StyleParams, Utterance, build_corpus, plan_corpus, split_by_speaker,
                     synth_utterance, utterance_seed)

__all__ = [
    "SAMPLE_RATE", "MelConfig", "MelSpec", "Waveform", "griffin_lim", "mel_centres", "mel_filterbank",
    "mel_to_linear", "quantize_pcm", "read_wav", "stft_mel", "write_wav",
    "CorpusManifest", "StyleParams", "Utterance", "build_corpus", "plan_corpus", "split_by_speaker",
    "synth_utterance", "utterance_seed",
]
