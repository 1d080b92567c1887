"""On-disk text and binary formats: token files, mel dumps, LLM export lines."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write

MEL_MAGIC = b"MELS"
MEL_VERSION = 1
SEP = "<SEP>"


class FormatError(ValueError):
    pass


@dataclass
class TokenRecord:
    utt_id: str
    semantic: np.ndarray  # (T_s,)
    acoustic: np.ndarray  # (T_a, layers)

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64).reshape(-1)
        a = np.asarray(self.acoustic, dtype=np.int64)
        self.acoustic = a.reshape(len(a), -1) if a.ndim < 2 else a
        if not self.utt_id or any(c in self.utt_id for c in "\t\n"):
            raise FormatError(f"bad utterance id {self.utt_id!r}")
        if len(self.semantic) == 0 or len(self.acoustic) == 0:
            raise FormatError(f"{self.utt_id}: empty token stream")
        if np.any(self.semantic < 0) or np.any(self.acoustic < 0):
            raise FormatError(f"{self.utt_id}: negative token id")

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenRecord) and self.utt_id == other.utt_id
                and np.array_equal(self.semantic, other.semantic) and np.array_equal(self.acoustic, other.acoustic))

    def line(self) -> str:
        s = " ".join(str(int(v)) for v in self.semantic)
        a = "|".join(" ".join(str(int(v)) for v in self.acoustic[:, l]) for l in range(self.acoustic.shape[1]))
        return f"{self.utt_id}\tS:{s}\tA:{a}"

    @classmethod
    def parse(cls, line: str) -> TokenRecord:
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3 or not parts[1].startswith("S:") or not parts[2].startswith("A:"):
            raise FormatError(f"malformed token line: {line[:60]!r}")
        try:
            sem = np.array([int(v) for v in parts[1][2:].split()], dtype=np.int64)
            layers = [[int(v) for v in chunk.split()] for chunk in parts[2][2:].split("|")]
        except ValueError as exc:
            raise FormatError(f"{parts[0]}: non-integer token id") from exc
        if len({len(l) for l in layers}) != 1:
            raise FormatError(f"{parts[0]}: acoustic layers differ in length")
        return cls(parts[0], sem, np.array(layers, dtype=np.int64).T)

    def check_ranges(self, semantic_vocab: int, acoustic_vocab: int) -> None:
        if self.semantic.max() >= semantic_vocab or self.acoustic.max() >= acoustic_vocab:
            raise FormatError(f"{self.utt_id}: token id outside the codebook")


def write_tokens(path: str | Path, records: list[TokenRecord]) -> None:
    atomic_write(path, "".join(r.line() + "\n" for r in records).encode("utf-8"))


def read_tokens(path: str | Path) -> list[TokenRecord]:
    out = [TokenRecord.parse(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len({r.utt_id for r in out}) != len(out):
        raise FormatError(f"{path}: duplicate utterance ids")
    return out


def llm_line(rec: TokenRecord) -> str:
    """Semantic tokens, a separator, then acoustic tokens tagged by layer: ``S5 S7 <SEP> A0_3``."""
    s = [f"S{int(v)}" for v in rec.semantic]
    a = [f"A{l}_{int(v)}" for row in rec.acoustic for l, v in enumerate(row)]
    return " ".join(s + [SEP] + a)


# ---------------------------------------------------------------- mel dumps

def encode_mel(mel: np.ndarray) -> bytes:
    mel = np.ascontiguousarray(mel, dtype="<f4")
    if mel.ndim != 2:
        raise FormatError("mel dump needs a (T, n_mels) array")
    return MEL_MAGIC + struct.pack("<III", MEL_VERSION, *mel.shape) + mel.tobytes()


def decode_mel(blob: bytes) -> np.ndarray:
    if blob[:4] != MEL_MAGIC or len(blob) < 16:
        raise FormatError("not a MELS dump")
    version, T, F = struct.unpack_from("<III", blob, 4)
    if version != MEL_VERSION:
        raise FormatError(f"unsupported mel dump version {version}")
    if len(blob) != 16 + 4 * T * F:
        raise FormatError("mel dump size does not match its header")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(T, F).copy()


def write_mel(path: str | Path, mel: np.ndarray) -> None:
    atomic_write(path, encode_mel(mel))


def read_mel(path: str | Path) -> np.ndarray:
    return decode_mel(Path(path).read_bytes())
