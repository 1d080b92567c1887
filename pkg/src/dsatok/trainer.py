"""Staged training: semantic tokenizer, reference style encoder, then the joint stage.

The joint stage alternates, per batch and with equal probability, between
plain reconstruction and recombination. Recombination hides every acoustic
token past a split point tau and scores the velocity only on frames >= tau, so the
decoder must take content from the semantic stream and style from the prefix.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, nn
from .features import MelNorm, pad_batch, pad_ids
from .model import JointModel, ModelConfig, Tokenizer, build_ref, build_semantic
from .semantic import SemanticEncoder, decode_symbols, semantic_loss
from .signal import Utterance
from .speaker import RefStyleEncoder, speaker_loss
from .tensor import AdamW, NonFiniteError, Tensor, WarmupCosine, backward, no_grad, ops

log = logging.getLogger("dsatok.train")

RECONSTRUCTION = "reconstruction"
RECOMBINATION = "recombination"
LAMBDA_SPK = 1.0
METRICS_HEADER = ["step", "mode", "l_fm", "l_spk", "l_total"]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- protocol

def choose_mode(rng: np.random.Generator, p: float = 0.5) -> str:
    if not 0.0 <= p <= 1.0:
        raise ValueError("mode probability must be in [0, 1]")
    return RECOMBINATION if rng.random() < p else RECONSTRUCTION


def tau_bounds(T_mel: int, lo: float = 0.25, hi: float = 0.75) -> tuple[int, int]:
    return math.ceil(lo * T_mel), math.floor(hi * T_mel)


def sample_tau(T_mel: int, rng: np.random.Generator, lo: float = 0.25, hi: float = 0.75) -> int:
    """Split frame uniform over [ceil(lo T), floor(hi T)]."""
    if T_mel < 8:
        raise ValueError(f"T_mel={T_mel} too short for a split point (need >= 8)")
    a, b = tau_bounds(T_mel, lo, hi)
    return int(rng.integers(a, b + 1))


def total_loss(l_fm, l_spk, lam: float = LAMBDA_SPK):
    return l_fm + lam * l_spk


def flow_loss(v: Tensor, v_target, loss_mask: np.ndarray) -> Tensor:
    """Mean squared velocity error over the frames selected by ``loss_mask`` (B, T)."""
    if not loss_mask.any():
        raise TrainingError("empty loss mask")
    w = loss_mask[:, :, None].astype(np.float32)
    d = (v - v_target) * w
    return ops.sum(d * d) * (1.0 / (w.sum() * v.shape[-1]))


# ---------------------------------------------------------------- configs

@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 8
    lr: float = 5e-4
    warmup: int = 300
    lr_floor: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    lambda_spk: float = LAMBDA_SPK
    cond_drop_p: float = 0.1
    mode_probability: float = 0.5
    tau_lo: float = 0.25
    tau_hi: float = 0.75
    max_frames: int = 128
    seed: int = 0
    ckpt_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        for name in ("cond_drop_p", "mode_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 < self.tau_lo < self.tau_hi < 1.0:
            raise ValueError("tau range must satisfy 0 < lo < hi < 1")
        if self.max_frames % 4:
            raise ValueError("max_frames must be a multiple of 4")


@dataclass
class StageConfig:
    """Semantic and reference-encoder pre-training."""
    steps: int = 2500
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    crop: int = 0  # 0 = whole utterances


# ---------------------------------------------------------------- data holder

@dataclass
class Corpus:
    """Training view of a manifest split: normalised mels plus labels."""
    utts: list[Utterance]
    mels: dict[str, np.ndarray]  # normalised
    speakers: dict[int, int]  # speaker id -> class index

    @classmethod
    def from_split(cls, utts, raw_mels, norm: MelNorm, speakers=None):
        spk = speakers or {s: i for i, s in enumerate(sorted({u.speaker_id for u in utts}))}
        return cls(list(utts), {u.utt_id: norm(raw_mels[u.utt_id]) for u in utts}, spk)

    def batch(self, utts: list[Utterance]):
        x, n = pad_batch([self.mels[u.utt_id] for u in utts])
        return x, n

    def length(self, u: Utterance) -> int:
        return len(self.mels[u.utt_id])


def _opt(params, cfg, total_steps):
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    sched = WarmupCosine(cfg.lr, cfg.warmup, total_steps, floor=0.1)
    return opt, sched


def _check(loss: Tensor, what: str):
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"{what}: loss became non-finite; aborting")


# ---------------------------------------------------------------- semantic stage

def ctc_eval(enc: SemanticEncoder, data: Corpus, batch_size: int = 32) -> tuple[float, float]:
    """(mean CTC loss, symbol error rate) over ``data``."""
    from .probe import edit_distance
    losses, errs, total = [], 0, 0
    with no_grad():
        for s in range(0, len(data.utts), batch_size):
            chunk = data.utts[s:s + batch_size]
            x, n = data.batch(chunk)
            targets = [list(u.content) for u in chunk]
            losses.append(semantic_loss(enc, x, n, targets).item() * len(chunk))
            for u, hyp in zip(chunk, decode_symbols(enc, x, n)):
                errs += edit_distance(hyp, list(u.content))
                total += len(u.content)
    return float(np.sum(losses) / len(data.utts)), errs / total


def train_semantic(train: Corpus, val: Corpus, model_cfg: ModelConfig, cfg: StageConfig = StageConfig(),
                   progress=None) -> tuple[SemanticEncoder, dict]:
    rng = np.random.default_rng([cfg.seed, 1])
    enc = build_semantic(model_cfg, np.random.default_rng([cfg.seed, 2]))
    params = enc.trainable()
    opt, sched = _opt(params, cfg, cfg.steps)
    init_loss, init_er = ctc_eval(enc, val)
    history = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(train.utts), size=cfg.batch_size, replace=False)
        chunk = [train.utts[i] for i in idx]
        x, n = train.batch(chunk)
        loss = semantic_loss(enc, x, n, [list(u.content) for u in chunk])
        _check(loss, "semantic")
        opt.zero_grad()
        backward(loss, params)
        opt.step(sched(step))
        history.append(loss.item())
        if progress and step % 100 == 0:
            progress(f"semantic step {step} ctc {np.mean(history[-100:]):.4f}")
    final_loss, final_er = ctc_eval(enc, val)
    enc.freeze()
    report = {"val_ctc_initial": init_loss, "val_ctc_final": final_loss,
              "val_er_initial": init_er, "val_er_final": final_er}
    return enc, report


# ---------------------------------------------------------------- reference encoder stage

def _crop_batch(data: Corpus, chunk, crop: int, rng):
    mels = []
    for u in chunk:
        m = data.mels[u.utt_id]
        if crop and len(m) > crop:
            s = int(rng.integers(0, len(m) - crop + 1))
            m = m[s:s + crop]
        mels.append(m)
    return pad_batch(mels)


def ref_similarity(ref: RefStyleEncoder, data: Corpus, batch_size: int = 64):
    embs = []
    for s in range(0, len(data.utts), batch_size):
        x, n = data.batch(data.utts[s:s + batch_size])
        embs.append(ref(Tensor(x), n))
    e = np.concatenate(embs)
    spk = np.array([u.speaker_id for u in data.utts])
    f0 = np.array([u.style.f0_base for u in data.utts])
    sim = e @ e.T
    same = (spk[:, None] == spk[None]) & ~np.eye(len(spk), dtype=bool)
    ratio = np.maximum(f0[:, None], f0[None]) / np.minimum(f0[:, None], f0[None])
    far = (spk[:, None] != spk[None]) & (ratio >= 1.5)
    diff = spk[:, None] != spk[None]
    return tuple(float(sim[m].mean()) if m.any() else float("nan") for m in (same, far, diff))


def train_ref_encoder(train: Corpus, val: Corpus, model_cfg: ModelConfig,
                      cfg: StageConfig = StageConfig(steps=1500, crop=96), progress=None):
    rng = np.random.default_rng([cfg.seed, 3])
    ref = build_ref(model_cfg, np.random.default_rng([cfg.seed, 4]))
    params = ref.trainable()
    opt, sched = _opt(params, cfg, cfg.steps)
    history = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(train.utts), size=cfg.batch_size, replace=False)
        chunk = [train.utts[i] for i in idx]
        x, n = _crop_batch(train, chunk, cfg.crop, rng)
        labels = np.array([train.speakers[u.speaker_id] for u in chunk])
        lp = ops.log_softmax(ref.logits(ref.embed(Tensor(x), n)), axis=-1)
        loss = -ops.mean(lp[np.arange(len(chunk)), labels])
        _check(loss, "reference encoder")
        opt.zero_grad()
        backward(loss, params)
        opt.step(sched(step))
        history.append(loss.item())
        if progress and step % 100 == 0:
            progress(f"ref step {step} ce {np.mean(history[-100:]):.4f}")
    ref.freeze()
    ref.trained = True
    same, far, diff = ref_similarity(ref, val)
    return ref, {"val_same_speaker_cos": same, "val_far_speaker_cos": far, "val_diff_speaker_cos": diff,
                 "final_ce": float(np.mean(history[-100:]))}


# ---------------------------------------------------------------- joint stage

@dataclass
class JointBatch:
    mel: np.ndarray  # (B, T, n_mels) normalised, zero padded
    lengths: np.ndarray
    z_s: list[np.ndarray]  # per utterance, len = lengths // 4
    s_ref: np.ndarray  # (B, style_dim)


class JointTrainer:
    """Owns the joint model, optimizer, RNG and metrics log for one run."""

    def __init__(self, tok: Tokenizer, train: Corpus, cfg: TrainConfig, out_dir: str | Path | None = None):
        if tok.ref is None or not tok.ref.frozen or not tok.semantic.frozen:
            raise TrainingError("joint training needs a frozen semantic tokenizer and reference encoder")
        self.tok = tok
        self.cfg = cfg
        self.train_data = train
        if tok.joint is None:
            tok.joint = JointModel(tok.cfg, np.random.default_rng([cfg.seed, 5]))
        self.model = tok.joint
        self.params = self.model.trainable()
        self.opt = AdamW(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
        self.sched = WarmupCosine(cfg.lr, cfg.warmup, cfg.steps, floor=cfg.lr_floor)
        self.rng = np.random.default_rng([cfg.seed, 6])
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir else None
        self.rows: list[list] = []
        self._precompute()

    def _precompute(self):
        """Frozen-stream features for every training utterance: z_s and s_ref from the full utterance."""
        data = self.train_data
        self.z_s, self.s_ref = {}, {}
        for s in range(0, len(data.utts), 64):
            chunk = data.utts[s:s + 64]
            x, n = data.batch(chunk)
            codes = self.tok.semantic.encode(x, n)
            style = self.tok.ref(Tensor(x), n)
            for u, c, e in zip(chunk, codes, style):
                self.z_s[u.utt_id] = c
                self.s_ref[u.utt_id] = e

    def sample_batch(self) -> JointBatch:
        cfg, data, rng = self.cfg, self.train_data, self.rng
        idx = rng.choice(len(data.utts), size=cfg.batch_size, replace=False)
        mels, zs, refs = [], [], []
        for i in idx:
            u = data.utts[int(i)]
            m = data.mels[u.utt_id]
            z = self.z_s[u.utt_id]
            T = 4 * len(z)
            start = 0
            if T > cfg.max_frames:
                start = 4 * int(rng.integers(0, (T - cfg.max_frames) // 4 + 1))
                T = cfg.max_frames
            mels.append(m[start:start + T])
            zs.append(z[start // 4:start // 4 + T // 4])
            refs.append(self.s_ref[u.utt_id])
        x, n = pad_batch(mels)
        return JointBatch(x, n, zs, np.stack(refs))

    # ---------------------------------------------------------------- loss
    def losses(self, batch: JointBatch, mode: str, rng: np.random.Generator, taus=None):
        """Returns (l_fm, l_spk, l_total) Tensors for one batch in one mode."""
        model, cfg = self.model, self.cfg
        B, T, F = batch.mel.shape
        n = batch.lengths
        x = Tensor(batch.mel)
        q, _, na = model.acoustic(x, n)
        e_a = model.upsampler.embed(q)
        ups = model.upsampler.factor
        if mode == RECOMBINATION:
            if taus is None:
                taus = np.array([sample_tau(int(t), rng, cfg.tau_lo, cfg.tau_hi) for t in n])
            taus = np.asarray(taus)
            # only tokens whose whole span lies before tau condition the decoder
            n_kv = np.maximum(1, taus // ups)
            loss_mask = nn.time_mask(n, T) & ~nn.time_mask(taus, T)
        elif mode == RECONSTRUCTION:
            n_kv = na
            loss_mask = nn.time_mask(n, T)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if not loss_mask.any(axis=1).all():
            raise TrainingError("empty loss mask (split point at or beyond the utterance end)")
        Ta = int(n_kv.max())
        e_a_used = e_a[:, :Ta]
        kv = model.upsampler(e_a_used, ups * Ta, n_kv)
        kv_mask = nn.time_mask(ups * n_kv, ups * Ta)

        e_s = model.decoder.adapter.upsample_batch(batch.z_s, n)
        if e_s.shape[1] < T:
            e_s = ops.pad_time(e_s, 0, T - e_s.shape[1])
        t = rng.random(B)
        m0 = rng.standard_normal((B, T, F)).astype(np.float32)
        drop = rng.random(B) < cfg.cond_drop_p
        tt = t.astype(np.float32)[:, None, None]
        m_t = (1 - tt) * m0 + tt * batch.mel
        v_target = batch.mel - m0
        v = model.decoder(Tensor(m_t), t, e_s, kv, mask=nn.time_mask(n, T), kv_mask=kv_mask, drop=drop)
        l_fm = flow_loss(v, Tensor(v_target), loss_mask)
        h = model.pool(e_a_used, n_kv)
        l_spk = speaker_loss(Tensor(batch.s_ref), h)
        return l_fm, l_spk, total_loss(l_fm, l_spk, cfg.lambda_spk)

    def training_step(self, batch: JointBatch | None = None, mode: str | None = None):
        self.step += 1
        rng = self.rng
        mode = mode or choose_mode(rng, self.cfg.mode_probability)
        batch = batch or self.sample_batch()
        l_fm, l_spk, l_total = self.losses(batch, mode, rng)
        _check(l_total, "joint")
        self.opt.zero_grad()
        try:
            backward(l_total, self.params)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite gradient at step {self.step}: {exc}") from exc
        self.opt.step(self.sched(self.step))
        row = [self.step, mode, float(l_fm.item()), float(l_spk.item()), float(l_total.item())]
        self.rows.append(row)
        return row

    # ---------------------------------------------------------------- persistence
    def save(self, path: str | Path) -> None:
        meta = {"step": self.step, "rng": _rng_state(self.rng), "train": asdict(self.cfg),
                "model": self.tok.cfg.to_dict()}
        meta.update(self.tok.meta())
        arrays = self.tok.arrays()
        arrays.update(self.opt.state_arrays())
        checkpoint.save(path, arrays, meta)

    def restore(self, path: str | Path) -> None:
        arrays, meta = checkpoint.load(path)
        self.model.load_state_dict(arrays, prefix="joint.")
        self.opt.load_state_arrays(arrays)
        self.step = int(meta["step"])
        self.rng.bit_generator.state = _rng_from_json(meta["rng"])

    def metrics_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "metrics.csv"

    def _write_rows(self, rows, fresh: bool):
        path = self.metrics_path()
        if path is None:
            return
        with open(path, "w" if fresh else "a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if fresh:
                w.writerow(METRICS_HEADER)
            for r in rows:
                w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])

    def run(self, resume: bool = False, progress=None, until: int | None = None) -> Path | None:
        """Train to ``cfg.steps`` (or stop early at ``until``, checkpointing there)."""
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = None if self.out_dir is None else self.out_dir / "last.dsat"
        if resume and ckpt is not None and ckpt.exists():
            self.restore(ckpt)
            _truncate_metrics(self.metrics_path(), self.step)
        else:
            self._write_rows([], fresh=True)
        pending = []
        t0 = time.time()
        stop = self.cfg.steps if until is None else min(until, self.cfg.steps)
        while self.step < stop:
            pending.append(self.training_step())
            if progress and self.step % self.cfg.log_every == 0:
                recent = np.array([r[2:] for r in self.rows[-self.cfg.log_every:]])
                progress(f"joint step {self.step} l_fm {recent[:, 0].mean():.4f} l_spk {recent[:, 1].mean():.4f} "
                         f"{(time.time() - t0) / len(self.rows):.2f}s/step")
            if self.step % self.cfg.ckpt_every == 0 or self.step == stop:
                self._write_rows(pending, fresh=False)
                pending = []
                if ckpt is not None:
                    self.save(ckpt)
        self._write_rows(pending, fresh=False)
        return ckpt


def _truncate_metrics(path: Path | None, step: int):
    if path is None or not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(keep))


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _rng_from_json(d: dict) -> dict:
    return {"bit_generator": d["bit_generator"],
            "state": {k: int(v) for k, v in d["state"].items()},
            "has_uint32": d["has_uint32"], "uinteger": d["uinteger"]}
