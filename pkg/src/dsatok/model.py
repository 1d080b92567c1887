"""The joint tokenizer: frozen semantic stream, trainable acoustic stream, flow decoder, speaker head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint, nn
from .acoustic import AcousticEncoder, AcousticUpsampler
from .decoder import DitConfig, FlowDecoder
from .features import MelNorm, pad_batch, pad_ids
from .fsq import FsqConfig
from .semantic import SEMANTIC_FSQ, SemanticEncoder
from .speaker import AttnPool, RefStyleEncoder
from .tensor import Tensor, no_grad

@dataclass(frozen=True)
class ModelConfig:
    K: int = 16
    n_speakers: int = 32
    acoustic_rate: int = 25
    acoustic_fsq: FsqConfig = field(default_factory=lambda: FsqConfig(4, 8, 1))
    semantic_fsq: FsqConfig = field(default_factory=lambda: SEMANTIC_FSQ)
    dit: DitConfig = field(default_factory=DitConfig)
    acoustic_dims: tuple = (64, 128, 128, 128)
    acoustic_dim: int = 128
    pool_attn: int = 128
    style_dim: int = 256

    def to_dict(self) -> dict:
        d = asdict(self)
        d["acoustic_dims"] = list(self.acoustic_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["acoustic_fsq"] = FsqConfig(**d["acoustic_fsq"])
        d["semantic_fsq"] = FsqConfig(**d["semantic_fsq"])
        d["dit"] = DitConfig(**d["dit"])
        d["acoustic_dims"] = tuple(d["acoustic_dims"])
        return cls(**d)


class JointModel(nn.Module):
    """Everything trained in the joint stage."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.acoustic = AcousticEncoder(cfg.dit.n_mels, cfg.acoustic_dims, cfg.acoustic_rate,
                                        cfg.acoustic_fsq, rng)
        self.upsampler = AcousticUpsampler(cfg.acoustic_fsq, cfg.acoustic_dim, cfg.acoustic_rate, rng)
        self.decoder = FlowDecoder(cfg.dit, cfg.semantic_fsq.codebook_size, rng)
        self.pool = AttnPool(cfg.acoustic_dim, cfg.pool_attn, cfg.style_dim, rng)


@dataclass
class Tokenizer:
    """Inference bundle: normaliser, frozen encoders, joint model."""
    norm: MelNorm
    semantic: SemanticEncoder
    ref: RefStyleEncoder | None
    joint: JointModel | None
    cfg: ModelConfig

    # ---------------------------------------------------------------- encoding
    def encode_semantic(self, mels: list[np.ndarray]) -> list[np.ndarray]:
        x, n = pad_batch([self.norm(m) for m in mels])
        return self.semantic.encode(x, n)

    def encode_acoustic(self, mels: list[np.ndarray]) -> list[np.ndarray]:
        """Per utterance (T_a, L) code arrays."""
        if any(len(m) < 1 for m in mels):
            raise ValueError("empty mel")
        x, n = pad_batch([self.norm(m) for m in mels], multiple=self.joint.acoustic.factor)
        with no_grad():
            _, codes, na = self.joint.acoustic(Tensor(x), n)
        return [codes[b, :na[b]] for b in range(len(mels))]

    def style(self, mels: list[np.ndarray]) -> np.ndarray:
        x, n = pad_batch([self.norm(m) for m in mels])
        return self.ref(Tensor(x), n)

    # ---------------------------------------------------------------- decoding
    def conditions(self, z_s: list[np.ndarray], z_a: list[np.ndarray]):
        """Semantic condition at 4 T_s frames, acoustic condition at its own native span."""
        up = self.joint.upsampler
        T_mel = np.array([4 * len(z) for z in z_s])
        T_kv = np.array([up.factor * len(z) for z in z_a])
        es = self.joint.decoder.adapter.upsample_batch(z_s, T_mel)
        codes = pad_ids([np.asarray(z).reshape(len(z), -1) for z in z_a])
        ea = up.embed_codes(codes)
        kv = up(ea, int(T_kv.max()), np.array([len(z) for z in z_a]))
        return es, kv, T_mel, T_kv

    def decode(self, z_s: list[np.ndarray], z_a: list[np.ndarray], steps: int = 32, omega: float = 2.0,
               seed: int = 0) -> list[np.ndarray]:
        """Log-mels (un-normalised) of length 4 len(z_s) each."""
        if len(z_s) != len(z_a):
            raise ValueError("need one acoustic stream per semantic stream")
        with no_grad():
            es, kv, T_mel, T_kv = self.conditions(z_s, z_a)
            T = es.shape[1]
            rng = np.random.default_rng(seed)
            m0 = rng.standard_normal((len(z_s), T, self.cfg.dit.n_mels)).astype(np.float32)
            mask = nn.time_mask(T_mel, T)
            kv_mask = nn.time_mask(T_kv, kv.shape[1])
            out = self.joint.decoder.sample(es, kv, steps, omega, seed, mask, kv_mask, m0=m0)
        return [self.norm.inverse(out[b, :T_mel[b]]) for b in range(len(z_s))]

    # ---------------------------------------------------------------- persistence
    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.norm.arrays())
        out.update(semantic_state(self.semantic, "semantic."))
        out.update({"ctc_head." + k: v for k, v in self.semantic.head.state_dict().items()})
        if self.ref is not None:
            out.update(self.ref.state_dict("ref."))
        if self.joint is not None:
            out.update(self.joint.state_dict("joint."))
        return out

    def meta(self) -> dict:
        return {"model": self.cfg.to_dict(), "has_ref": self.ref is not None,
                "has_joint": self.joint is not None}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        checkpoint.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple[Tokenizer, dict]:
        arrays, meta = checkpoint.load(path)
        return cls.from_arrays(arrays, meta), meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> Tokenizer:
        if not meta or "model" not in meta:
            raise checkpoint.CheckpointError("checkpoint carries no model configuration")
        cfg = ModelConfig.from_dict(meta["model"])
        sem = build_semantic(cfg)
        sem.load_state_dict(arrays, prefix="semantic.", strict=False)
        sem.head.load_state_dict(arrays, prefix="ctc_head.", strict=False)
        missing = [k for k in semantic_state(sem) if "semantic." + k not in arrays]
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint lacks semantic parameters: {missing[:3]}")
        sem.freeze()
        ref = None
        if meta.get("has_ref"):
            ref = build_ref(cfg)
            ref.load_state_dict(arrays, prefix="ref.")
            ref.freeze()
            ref.trained = True
        joint = None
        if meta.get("has_joint"):
            joint = JointModel(cfg, np.random.default_rng(0))
            joint.load_state_dict(arrays, prefix="joint.")
        return cls(MelNorm.from_arrays(arrays), sem, ref, joint, cfg)


def semantic_state(enc: SemanticEncoder, prefix: str = "") -> dict[str, np.ndarray]:
    """Encoder + quantizer projection only; the CTC head is not part of the tokenizer."""
    return {prefix + k: v for k, v in enc.state_dict().items() if not k.startswith("head.")}


def build_semantic(cfg: ModelConfig, rng=None) -> SemanticEncoder:
    return SemanticEncoder(cfg.K, cfg.dit.n_mels, fsq=cfg.semantic_fsq, rng=rng or np.random.default_rng(0))


def build_ref(cfg: ModelConfig, rng=None) -> RefStyleEncoder:
    return RefStyleEncoder(cfg.dit.n_mels, cfg.n_speakers, cfg.style_dim, rng or np.random.default_rng(0))


def load_arrays_into(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str, strict: bool = True):
    module.load_state_dict(arrays, prefix=prefix, strict=strict)
    return module
