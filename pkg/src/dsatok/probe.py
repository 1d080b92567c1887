"""Disentanglement probes and the reconstruction / recombination metric suite.

A probe is a small network trained on a frozen token stream: token embeddings
(summed over layers), two kernel-3 convolutions, a bidirectional GRU, then
either a CTC head over content symbols or mean pooling plus an MLP over
speakers. Probes only ever see token ids, so any token file can be probed.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint, nn
from .ctc import CtcInfeasible, ctc_loss, greedy_decode, min_frames
from .features import pad_ids
from .tensor import AdamW, Tensor, backward, no_grad, ops

log = logging.getLogger("dsatok.probe")

CONTENT = "content"
SPEAKER = "speaker"


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def error_rate(hyps, refs) -> float:
    """Total edits over total reference length (may exceed 1)."""
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("empty reference set")
    return sum(edit_distance(h, r) for h, r in zip(hyps, refs)) / total


# ---------------------------------------------------------------- data

@dataclass
class TokenSet:
    """Token streams with their labels; tokens[i] has shape (T_i, layers)."""
    utt_ids: list[str]
    tokens: list[np.ndarray]
    vocab: tuple[int, ...]
    content: list[tuple[int, ...]]
    speakers: list[int]

    def __post_init__(self):
        if not self.utt_ids:
            raise ValueError("empty token set")
        self.tokens = [np.asarray(t, dtype=np.int64).reshape(len(t), -1) for t in self.tokens]
        for u, t in zip(self.utt_ids, self.tokens):
            if len(t) < 1:
                raise ValueError(f"{u}: empty token stream")
            if t.shape[1] != len(self.vocab):
                raise ValueError(f"{u}: {t.shape[1]} token layers, vocabulary describes {len(self.vocab)}")
            if np.any(t < 0) or np.any(t >= np.array(self.vocab)):
                raise ValueError(f"{u}: token id outside its codebook")

    def __len__(self) -> int:
        return len(self.utt_ids)

    def subset(self, idx) -> TokenSet:
        return TokenSet([self.utt_ids[i] for i in idx], [self.tokens[i] for i in idx], self.vocab,
                        [self.content[i] for i in idx], [self.speakers[i] for i in idx])


def token_set(utts, tokens: dict[str, np.ndarray], vocab) -> TokenSet:
    return TokenSet([u.utt_id for u in utts], [tokens[u.utt_id] for u in utts], tuple(vocab),
                    [u.content for u in utts], [u.speaker_id for u in utts])


def label_tokens(utts, K: int, replay: int = 3) -> TokenSet:
    """Ground-truth content symbols as a one-layer token stream.

    Each symbol is repeated ``replay`` times and followed by a gap token ``K``, mirroring the silent gaps of
    the corpus so that repeated symbols stay separable.
    """
    def stream(content):
        return np.array([t for c in content for t in [c] * replay + [K]])[:, None]
    return token_set(utts, {u.utt_id: stream(u.content) for u in utts}, (K + 1,))


# ---------------------------------------------------------------- model

@dataclass
class ProbeConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    emb_dim: int = 64
    hidden: int = 64
    seed: int = 0


class ProbeModel(nn.Module):
    def __init__(self, vocab: tuple[int, ...], target: str, n_out: int, cfg: ProbeConfig,
                 rng: np.random.Generator):
        if target not in (CONTENT, SPEAKER):
            raise ValueError(f"unknown probe target {target!r}")
        d = cfg.emb_dim
        self.embeddings = [nn.Embedding(int(v), d, rng, std=1.0) for v in vocab]
        self.conv1 = nn.Conv1d(d, d, 3, rng, padding=1)
        self.conv2 = nn.Conv1d(d, d, 3, rng, padding=1)
        self.rnn = nn.BiGRU(d, cfg.hidden, rng)
        width = 2 * cfg.hidden
        if target == CONTENT:
            self.out = nn.Linear(width, n_out + 1, rng)  # blank = n_out
        else:
            self.mlp = nn.Linear(width, width, rng)
            self.out = nn.Linear(width, n_out, rng)
        self._target = target
        self._n_out = n_out

    @property
    def target(self) -> str:
        return self._target

    def features(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        mask = nn.time_mask(lengths, ids.shape[1])
        x = self.embeddings[0](ids[..., 0])
        for l, emb in enumerate(self.embeddings[1:], 1):
            x = x + emb(ids[..., l])
        x = nn.apply_mask(x, mask)
        x = nn.apply_mask(ops.gelu(self.conv1(x)), mask)
        x = nn.apply_mask(ops.gelu(self.conv2(x)), mask)
        return self.rnn(x, mask)

    def __call__(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Content: (B, T, K+1) log-probs. Speaker: (B, n_speakers) logits."""
        h = self.features(ids, lengths)
        if self._target == CONTENT:
            return ops.log_softmax(self.out(h), axis=-1)
        w = (nn.time_mask(lengths, ids.shape[1]) / np.asarray(lengths)[:, None]).astype(h.data.dtype)
        pooled = ops.sum(h * w[:, :, None], axis=1)
        return self.out(ops.gelu(self.mlp(pooled)))


def _batch(ts: TokenSet, idx):
    ids = pad_ids([ts.tokens[i] for i in idx])
    lengths = np.array([len(ts.tokens[i]) for i in idx])
    return ids, lengths


@dataclass
class ProbeResult:
    target: str
    metric: float  # content error rate or speaker accuracy on the selection split
    best_epoch: int
    curve: list[float] = field(default_factory=list)


class Probe:
    """A trained probe bound to its label space."""

    def __init__(self, model: ProbeModel, speakers: dict[int, int] | None, K: int):
        self.model = model
        self.speakers = speakers
        self.K = K

    def predict(self, ts: TokenSet, batch_size: int = 64) -> list:
        out = []
        with no_grad():
            for s in range(0, len(ts), batch_size):
                idx = list(range(s, min(len(ts), s + batch_size)))
                ids, n = _batch(ts, idx)
                y = self.model(ids, n).data
                if self.model.target == CONTENT:
                    out += [greedy_decode(y[b], blank=self.K, length=int(n[b])) for b in range(len(idx))]
                else:
                    inv = {v: k for k, v in self.speakers.items()}
                    out += [inv[int(c)] for c in y.argmax(axis=-1)]
        return out

    def save(self, path) -> None:
        m = self.model
        meta = {"target": m.target, "K": self.K, "n_out": m._n_out,
                "vocab": [int(e.table.shape[0]) for e in m.embeddings],
                "emb_dim": int(m.embeddings[0].table.shape[1]), "hidden": int(m.rnn.fwd._hidden),
                "speakers": None if self.speakers is None else [[int(k), int(v)] for k, v in self.speakers.items()]}
        checkpoint.save(path, m.state_dict(), meta)

    @classmethod
    def load(cls, path) -> Probe:
        arrays, meta = checkpoint.load(path)
        cfg = ProbeConfig(emb_dim=meta["emb_dim"], hidden=meta["hidden"])
        model = ProbeModel(tuple(meta["vocab"]), meta["target"], meta["n_out"], cfg, np.random.default_rng(0))
        model.load_state_dict(arrays)
        model.freeze()
        spk = None if meta["speakers"] is None else {k: v for k, v in meta["speakers"]}
        return cls(model, spk, meta["K"])

    def score(self, ts: TokenSet) -> float:
        pred = self.predict(ts)
        if self.model.target == CONTENT:
            return error_rate(pred, ts.content)
        return float(np.mean([p == s for p, s in zip(pred, ts.speakers)]))


def train_probe(train: TokenSet, val: TokenSet, target: str, K: int = 16,
                cfg: ProbeConfig = ProbeConfig(), progress=None) -> tuple[Probe, ProbeResult]:
    """Train for ``cfg.epochs`` epochs; keep the parameters of the best validation epoch."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("empty probe dataset")
    rng = np.random.default_rng([cfg.seed, 11])
    speakers = {s: i for i, s in enumerate(sorted(set(train.speakers)))}
    n_out = K if target == CONTENT else len(speakers)
    model = ProbeModel(train.vocab, target, n_out, cfg, np.random.default_rng([cfg.seed, 12]))
    probe = Probe(model, speakers, K)
    keep = list(range(len(train)))
    if target == CONTENT:
        keep = [i for i in keep if len(train.tokens[i]) >= min_frames(train.content[i])]
        if len(keep) < len(train):
            log.warning("content probe: %d utterances too short for CTC skipped", len(train) - len(keep))
        if not keep:
            raise CtcInfeasible("no training utterance is long enough for its content under CTC")
    params = model.trainable()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=1.0)
    better = (lambda a, b: a < b) if target == CONTENT else (lambda a, b: a > b)
    best, best_epoch, best_state, curve = None, -1, None, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(keep)
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            ids, n = _batch(train, idx)
            y = model(ids, n)
            if target == CONTENT:
                loss = ctc_loss(y, [list(train.content[i]) for i in idx], lengths=n, blank=K)
            else:
                labels = np.array([speakers[train.speakers[i]] for i in idx])
                loss = -ops.mean(ops.log_softmax(y, axis=-1)[np.arange(len(idx)), labels])
            opt.zero_grad()
            backward(loss, params)
            opt.step()
        metric = probe.score(val)
        curve.append(metric)
        if progress:
            progress(f"probe {target} epoch {epoch + 1} val {metric:.4f}")
        if best is None or better(metric, best):
            best, best_epoch = metric, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.freeze()
    return probe, ProbeResult(target, float(best), best_epoch, curve)


# ---------------------------------------------------------------- reports

@dataclass
class ProbeReport:
    semantic_content_er: float
    semantic_speaker_acc: float
    acoustic_content_er: float
    acoustic_speaker_acc: float

    def rows(self) -> list[list]:
        return [["semantic", self.semantic_content_er, self.semantic_speaker_acc],
                ["acoustic", self.acoustic_content_er, self.acoustic_speaker_acc]]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stream", "content_er", "speaker_acc"])
        for r in self.rows():
            w.writerow([r[0], f"{r[1]:.6f}", f"{r[2]:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'stream':<10} {'content ER':>11} {'speaker ACC':>12}"]
        for name, er, acc in self.rows():
            lines.append(f"{name:<10} {er:>11.4f} {acc:>12.4f}")
        return "\n".join(lines)


def probe_streams(streams: dict[str, tuple[TokenSet, TokenSet, TokenSet]], K: int,
                  cfg: ProbeConfig = ProbeConfig(), progress=None):
    """Train a content and a speaker probe per stream; score each on its test split.

    ``streams`` maps a name to (train, val, test) token sets. Returns
    {name: {"content_er", "speaker_acc"}} and the trained content probes.
    """
    out, probes = {}, {}
    for name, (tr, va, te) in streams.items():
        cp, _ = train_probe(tr, va, CONTENT, K, cfg, progress)
        sp, _ = train_probe(tr, va, SPEAKER, K, cfg, progress)
        out[name] = {"content_er": cp.score(te), "speaker_acc": sp.score(te)}
        probes[name] = (cp, sp)
    return out, probes


def probe_report(sem: dict, ac: dict) -> ProbeReport:
    return ProbeReport(sem["content_er"], sem["speaker_acc"], ac["content_er"], ac["speaker_acc"])


# ---------------------------------------------------------------- generation metrics

RECONSTRUCTION = "reconstruction"
RECOMBINATION = "recombination"


@dataclass
class EvalReport:
    mode: str
    n: int
    content_error_rate: float
    style_sim_to_acoustic_source: float
    style_sim_to_semantic_source: float
    mel_recon_mse: float | None = None

    @property
    def style_margin(self) -> float:
        return self.style_sim_to_acoustic_source - self.style_sim_to_semantic_source

    def as_dict(self) -> dict:
        d = asdict(self)
        d["style_margin"] = self.style_margin
        return d

    def csv(self) -> str:
        d = self.as_dict()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(d))
        w.writerow(["" if v is None else v for v in d.values()])
        return buf.getvalue()

    def table(self) -> str:
        return "\n".join(f"{k:<30} {v}" for k, v in self.as_dict().items())


def cross_speaker_pairs(utts, n: int, seed: int = 0, allow_same_speaker: bool = False):
    """``n`` (semantic source, acoustic source) pairs of distinct utterances."""
    rng = np.random.default_rng([seed, 21])
    if len(utts) < 2:
        raise ValueError("need at least two utterances for pairing")
    pairs = []
    while len(pairs) < n:
        a, b = rng.choice(len(utts), size=2, replace=False)
        if not allow_same_speaker and utts[a].speaker_id == utts[b].speaker_id:
            continue
        pairs.append((utts[int(a)], utts[int(b)]))
    return pairs


def eval_suite(tok, mels: dict[str, np.ndarray], pairs, content_probe: Probe, mode: str,
               steps: int = 32, omega: float = 2.0, seed: int = 0, batch_size: int = 8,
               allow_same_speaker: bool = False, return_mels: bool = False):
    """Generate from each (A, B) pair and score content against A and style against both.

    ``mels`` holds raw log-mels. For reconstruction every pair must be (A, A).
    """
    if mode not in (RECONSTRUCTION, RECOMBINATION):
        raise ValueError(f"unknown mode {mode!r}")
    if not pairs:
        raise ValueError("no evaluation pairs")
    for a, b in pairs:
        if mode == RECONSTRUCTION and a.utt_id != b.utt_id:
            raise ValueError("reconstruction expects (A, A) pairs")
        if mode == RECOMBINATION and not allow_same_speaker and a.speaker_id == b.speaker_id:
            raise ValueError(f"same-speaker pair {a.utt_id}/{b.utt_id} (pass allow_same_speaker)")
    gens, mses = [], []
    for s in range(0, len(pairs), batch_size):
        chunk = pairs[s:s + batch_size]
        z_s = tok.encode_semantic([mels[a.utt_id] for a, _ in chunk])
        z_a = tok.encode_acoustic([mels[b.utt_id] for _, b in chunk])
        out = tok.decode(z_s, z_a, steps=steps, omega=omega, seed=seed + s)
        for (a, _), g in zip(chunk, out):
            gens.append(g)
            ref = mels[a.utt_id][:len(g)]
            mses.append(float(np.mean((g - ref) ** 2)))
    # content: re-encode generated mels with the semantic tokenizer, read with the probe
    regen = tok.encode_semantic(gens)
    ts = TokenSet([a.utt_id for a, _ in pairs], [z[:, None] for z in regen],
                  (tok.cfg.semantic_fsq.codebook_size,), [a.content for a, _ in pairs],
                  [a.speaker_id for a, _ in pairs])
    er = content_probe.score(ts)
    e_gen = _styles(tok, gens)
    e_a = _styles(tok, [mels[a.utt_id] for a, _ in pairs])
    e_b = _styles(tok, [mels[b.utt_id] for _, b in pairs])
    report = EvalReport(mode, len(pairs), float(er),
                        float(np.mean(np.sum(e_gen * e_b, axis=1))),
                        float(np.mean(np.sum(e_gen * e_a, axis=1))),
                        float(np.mean(mses)) if mode == RECONSTRUCTION else None)
    return (report, gens) if return_mels else report


def _styles(tok, mels: list[np.ndarray], batch_size: int = 32) -> np.ndarray:
    return np.concatenate([tok.style(mels[s:s + batch_size]) for s in range(0, len(mels), batch_size)])
