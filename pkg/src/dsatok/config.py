"""Run configuration: a flat ``namespace.key=value`` text file over documented defaults."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DitConfig
from .fsq import FsqConfig
from .model import ModelConfig
from .probe import ProbeConfig
from .trainer import StageConfig, TrainConfig

# key -> (default, help)
DEFAULTS: dict[str, tuple[object, str]] = {
    "signal.n_speakers": (32, "speakers in the synthetic corpus"),
    "signal.utts_per_speaker": (100, "utterances rendered per speaker"),
    "signal.K": (16, "content symbol inventory size"),
    "signal.n_val": (10, "validation utterances held out per speaker"),
    "signal.n_test": (10, "test utterances held out per speaker"),
    "fsq.semantic_levels": (4, "semantic FSQ levels per channel"),
    "fsq.semantic_channels": (5, "semantic FSQ channels (4^5 = 1024 codes)"),
    "fsq.acoustic_levels": (4, "acoustic FSQ levels per channel"),
    "fsq.acoustic_channels": (8, "acoustic FSQ channels (4^8 = 65536 codes)"),
    "fsq.acoustic_layers": (1, "stacked acoustic FSQ layers"),
    "fsq.acoustic_rate": (25, "acoustic token rate in Hz (25 or 50)"),
    "dit.n_blocks": (4, "DiT blocks"),
    "dit.dim": (128, "DiT width"),
    "dit.heads": (4, "attention heads"),
    "dit.ffn_inner": (512, "feed-forward inner width"),
    "dit.sample_steps": (32, "Euler steps at inference"),
    "dit.omega": (2.0, "classifier-free guidance scale"),
    "train.steps": (6000, "joint training steps"),
    "train.batch_size": (8, "joint batch size (utterances)"),
    "train.lr": (5e-4, "joint peak learning rate"),
    "train.warmup": (300, "joint warmup steps"),
    "train.lambda_spk": (1.0, "speaker loss weight"),
    "train.cond_drop_p": (0.1, "per-utterance condition drop probability"),
    "train.mode_probability": (0.5, "probability of a recombination batch"),
    "train.tau_lo": (0.25, "split point lower bound (fraction of T_mel)"),
    "train.tau_hi": (0.75, "split point upper bound (fraction of T_mel)"),
    "train.max_frames": (128, "random crop length for joint batches (multiple of 4)"),
    "train.ckpt_every": (500, "checkpoint period in steps"),
    "train.semantic_steps": (2500, "semantic tokenizer CTC steps"),
    "train.semantic_batch": (16, "semantic tokenizer batch size"),
    "train.semantic_lr": (1e-3, "semantic tokenizer peak learning rate"),
    "train.ref_steps": (1500, "reference style encoder steps"),
    "train.ref_batch": (16, "reference style encoder batch size"),
    "train.ref_crop": (96, "reference style encoder crop length in frames"),
    "probe.epochs": (15, "probe training epochs"),
    "probe.batch_size": (32, "probe batch size"),
    "probe.lr": (2e-3, "probe learning rate"),
    "probe.emb_dim": (64, "probe token embedding width"),
    "probe.hidden": (64, "probe GRU width per direction"),
    "probe.pairs": (200, "cross-speaker recombination pairs"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (v, _) in DEFAULTS.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw) if isinstance(raw, str) else raw

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            cfg.set(k, v)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
        cfg = cls.parse(Path(path).read_text(encoding="utf-8")) if path else cls()
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip())
        return cfg

    def text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in DEFAULTS)

    # ---------------------------------------------------------------- typed views
    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            K=v["signal.K"], n_speakers=v["signal.n_speakers"], acoustic_rate=v["fsq.acoustic_rate"],
            acoustic_fsq=FsqConfig(v["fsq.acoustic_levels"], v["fsq.acoustic_channels"], v["fsq.acoustic_layers"]),
            semantic_fsq=FsqConfig(v["fsq.semantic_levels"], v["fsq.semantic_channels"], 1),
            dit=DitConfig(n_blocks=v["dit.n_blocks"], dim=v["dit.dim"], heads=v["dit.heads"],
                          ffn_inner=v["dit.ffn_inner"]))

    def train(self, seed: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["train.steps"], batch_size=v["train.batch_size"], lr=v["train.lr"], warmup=v["train.warmup"],
            lambda_spk=v["train.lambda_spk"], cond_drop_p=v["train.cond_drop_p"],
            mode_probability=v["train.mode_probability"], tau_lo=v["train.tau_lo"], tau_hi=v["train.tau_hi"],
            max_frames=v["train.max_frames"], ckpt_every=v["train.ckpt_every"], seed=seed)

    def semantic_stage(self, seed: int) -> StageConfig:
        v = self.values
        return StageConfig(steps=v["train.semantic_steps"], batch_size=v["train.semantic_batch"],
                           lr=v["train.semantic_lr"], seed=seed)

    def ref_stage(self, seed: int) -> StageConfig:
        v = self.values
        return StageConfig(steps=v["train.ref_steps"], batch_size=v["train.ref_batch"], lr=1e-3,
                           seed=seed, crop=v["train.ref_crop"])

    def probe(self, seed: int) -> ProbeConfig:
        v = self.values
        return ProbeConfig(epochs=v["probe.epochs"], batch_size=v["probe.batch_size"], lr=v["probe.lr"],
                           emb_dim=v["probe.emb_dim"], hidden=v["probe.hidden"], seed=seed)
