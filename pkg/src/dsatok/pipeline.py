"""Staged pipeline shared by the CLI and the end-to-end experiment driver.

Order: corpus -> semantic tokenizer (CTC) -> reference style encoder -> joint
stage -> probes -> generation metrics. Each stage consumes the checkpoint of
the previous one and refuses to run without it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .features import MelNorm, load_mels
from .formats import TokenRecord
from .model import Tokenizer
from .probe import (CONTENT, RECOMBINATION, RECONSTRUCTION, Probe, ProbeReport, TokenSet, cross_speaker_pairs,
                    eval_suite, token_set, train_probe, SPEAKER)
from .signal import CorpusManifest, Utterance, build_corpus, split_by_speaker
from .trainer import Corpus, JointTrainer, train_ref_encoder, train_semantic

log = logging.getLogger("dsatok")


class StageError(RuntimeError):
    """A pipeline stage was invoked without its prerequisite checkpoint."""


@dataclass
class Data:
    manifest: CorpusManifest
    mels: dict[str, np.ndarray]
    train: list[Utterance]
    val: list[Utterance]
    test: list[Utterance]

    def split(self, name: str) -> list[Utterance]:
        if name == "all":
            return list(self.manifest.utterances)
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def prepare(corpus_dir: str | Path, rc: RunConfig) -> Data:
    manifest = CorpusManifest.read(corpus_dir)
    mels = load_mels(manifest)
    train, val, test = split_by_speaker(manifest, rc["signal.n_val"], rc["signal.n_test"])
    return Data(manifest, mels, train, val, test)


def require(tok_meta: dict | None, *stages: str) -> None:
    names = {"ref": "has_ref", "joint": "has_joint"}
    for s in stages:
        if not tok_meta or not tok_meta.get(names[s]):
            prior = {"ref": "train-ref-encoder", "joint": "train"}[s]
            raise StageError(f"checkpoint lacks the {s} stage; run `{prior}` first")


def corpora(tok_norm: MelNorm, data: Data):
    tr = Corpus.from_split(data.train, data.mels, tok_norm)
    va = Corpus.from_split(data.val, data.mels, tok_norm, tr.speakers)
    return tr, va


# ---------------------------------------------------------------- stages

def stage_semantic(data: Data, rc: RunConfig, seed: int, progress=None) -> tuple[Tokenizer, dict]:
    norm = MelNorm.fit([data.mels[u.utt_id] for u in data.train])
    cfg = rc.model()
    tr, va = corpora(norm, data)
    sem, report = train_semantic(tr, va, cfg, rc.semantic_stage(seed), progress)
    return Tokenizer(norm, sem, None, None, cfg), report


def stage_ref(tok: Tokenizer, data: Data, rc: RunConfig, seed: int, progress=None) -> dict:
    tr, va = corpora(tok.norm, data)
    tok.ref, report = train_ref_encoder(tr, va, tok.cfg, rc.ref_stage(seed), progress)
    return report


def stage_joint(tok: Tokenizer, data: Data, rc: RunConfig, seed: int, out_dir: str | Path,
                resume: bool = False, progress=None) -> Path:
    tr, _ = corpora(tok.norm, data)
    trainer = JointTrainer(tok, tr, rc.train(seed), out_dir)
    return trainer.run(resume=resume, progress=progress)


def tokenize(tok: Tokenizer, mels: list[np.ndarray], utt_ids: list[str], batch_size: int = 32) -> list[TokenRecord]:
    out = []
    for s in range(0, len(mels), batch_size):
        chunk = mels[s:s + batch_size]
        zs = tok.encode_semantic(chunk)
        za = tok.encode_acoustic(chunk)
        out += [TokenRecord(u, a, b) for u, a, b in zip(utt_ids[s:s + batch_size], zs, za)]
    return out


def stream_sets(records: dict[str, TokenRecord], data: Data, sem_vocab: int | None = None,
                ac_vocab: int | None = None):
    """(train, val, test) TokenSets for the semantic and the acoustic stream."""
    missing = [u.utt_id for u in data.train + data.val + data.test if u.utt_id not in records]
    if missing:
        raise ValueError(f"token file lacks {len(missing)} utterances, e.g. {missing[0]}")
    sem_vocab = sem_vocab or 1 + max(int(r.semantic.max()) for r in records.values())
    layers = next(iter(records.values())).acoustic.shape[1]
    ac_vocab = ac_vocab or 1 + max(int(r.acoustic.max()) for r in records.values())
    sem = {k: r.semantic[:, None] for k, r in records.items()}
    ac = {k: r.acoustic for k, r in records.items()}
    splits = (data.train, data.val, data.test)
    return ({"semantic": tuple(token_set(s, sem, (sem_vocab,)) for s in splits),
             "acoustic": tuple(token_set(s, ac, (ac_vocab,) * layers) for s in splits)})


def run_probes(streams: dict, K: int, rc: RunConfig, seed: int, progress=None):
    cfg = rc.probe(seed)
    cells, probes, curves = {}, {}, {}
    for name, (tr, va, te) in streams.items():
        for target in (CONTENT, SPEAKER):
            t0 = time.time()
            probe, res = train_probe(tr, va, target, K, cfg, progress)
            cells[(name, target)] = probe.score(te)
            probes[(name, target)] = probe
            curves[f"{name}_{target}"] = {"val_curve": res.curve, "best_epoch": res.best_epoch,
                                          "seconds": time.time() - t0}
    report = ProbeReport(cells[("semantic", CONTENT)], cells[("semantic", SPEAKER)],
                         cells[("acoustic", CONTENT)], cells[("acoustic", SPEAKER)])
    return report, probes, curves


def eval_pairs(data: Data, mode: str, n: int, seed: int, allow_same_speaker: bool = False):
    """Held-out (semantic source, acoustic source) pairs for the metric suite."""
    if mode == RECOMBINATION:
        return cross_speaker_pairs(data.test, n, seed, allow_same_speaker)
    return [(u, u) for u in data.test[:n]]


def pairs_digest(pairs) -> str:
    text = "".join(f"{a.utt_id},{b.utt_id}\n" for a, b in pairs)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_eval(tok: Tokenizer, data: Data, probe: Probe, mode: str, rc: RunConfig, seed: int,
             n_pairs: int | None = None, pairs=None, allow_same_speaker: bool = False,
             steps: int | None = None):
    if pairs is None:
        pairs = eval_pairs(data, mode, n_pairs or rc["probe.pairs"], seed, allow_same_speaker)
    return eval_suite(tok, data.mels, pairs, probe, mode, steps=steps or rc["dit.sample_steps"],
                      omega=rc["dit.omega"], seed=seed, allow_same_speaker=allow_same_speaker)


# ---------------------------------------------------------------- experiment driver

def experiment(out: Path, corpus: Path, rc: RunConfig, seed: int, resume: bool = True,
               stop_after: str | None = None) -> dict:
    """Runs (or resumes) every stage, writing checkpoints and ``results.json`` under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(rc.text())
    lg = _file_logger(out / "progress.log")
    timings, results = {}, {}
    res_path = out / "results.json"
    if res_path.exists() and resume:
        results = json.loads(res_path.read_text())
        timings = results.get("timings", {})

    results["seed"] = seed
    results["config"] = dict(rc.values)

    def save():
        results["timings"] = timings
        res_path.write_text(json.dumps(results, indent=2, sort_keys=True))

    t0 = time.time()
    if not (corpus / "manifest.tsv").exists():
        build_corpus(corpus, rc["signal.n_speakers"], rc["signal.utts_per_speaker"], rc["signal.K"], seed)
        timings["corpus"] = time.time() - t0
    data = prepare(corpus, rc)
    timings.setdefault("corpus+mels", time.time() - t0)

    sem_ck, ref_ck = out / "semantic.dsat", out / "ref.dsat"
    if sem_ck.exists() and resume:
        tok, _ = Tokenizer.load(sem_ck)
    else:
        t = time.time()
        tok, rep = stage_semantic(data, rc, seed, lg)
        tok.save(sem_ck, {"stage": "semantic"})
        results["semantic_stage"] = rep
        timings["semantic"] = time.time() - t
        save()
    if ref_ck.exists() and resume:
        tok, _ = Tokenizer.load(ref_ck)
    else:
        t = time.time()
        results["ref_stage"] = stage_ref(tok, data, rc, seed, lg)
        tok.save(ref_ck, {"stage": "ref"})
        timings["ref"] = time.time() - t
        save()
    if stop_after == "ref":
        return results
    model_ck = out / "model.dsat"
    if not (model_ck.exists() and resume):
        t = time.time()
        stage_joint(tok, data, rc, seed, out / "joint", resume=resume, progress=lg)
        tok.save(model_ck, {"stage": "joint"})
        timings["joint"] = timings.get("joint", 0.0) + time.time() - t
        save()
    tok, _ = Tokenizer.load(model_ck)

    if "probe_report" not in results:
        t = time.time()
        utts = data.train + data.val + data.test
        recs = tokenize(tok, [data.mels[u.utt_id] for u in utts], [u.utt_id for u in utts])
        recs = {r.utt_id: r for r in recs}
        streams = stream_sets(recs, data, tok.cfg.semantic_fsq.codebook_size, tok.cfg.acoustic_fsq.codebook_size)
        report, probes, curves = run_probes(streams, tok.cfg.K, rc, seed, lg)
        probes[("semantic", CONTENT)].save(out / "content_probe.dsat")
        results["probe_report"] = {"semantic_content_er": report.semantic_content_er,
                                   "semantic_speaker_acc": report.semantic_speaker_acc,
                                   "acoustic_content_er": report.acoustic_content_er,
                                   "acoustic_speaker_acc": report.acoustic_speaker_acc}
        results["probe_curves"] = curves
        (out / "probe_report.csv").write_text(report.csv())
        (out / "probe_report.txt").write_text(report.table() + "\n")
        timings["probes"] = time.time() - t
        save()
    probe = Probe.load(out / "content_probe.dsat")
    results["pairs_digest"] = pairs_digest(eval_pairs(data, RECOMBINATION, rc["probe.pairs"], seed))
    for mode in (RECOMBINATION, RECONSTRUCTION):
        if mode in results:
            continue
        t = time.time()
        rep = run_eval(tok, data, probe, mode, rc, seed)
        results[mode] = rep.as_dict()
        (out / f"eval_{mode}.txt").write_text(rep.table() + "\n")
        timings[f"eval_{mode}"] = time.time() - t
        save()
    lg(f"done in {sum(timings.values()):.0f}s of recorded stage time")
    return results


def _file_logger(path: Path):
    def emit(msg: str):
        line = f"{time.strftime('%H:%M:%S')} {msg}"
        with open(path, "a") as f:
            f.write(line + "\n")
    return emit


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m dsatok.pipeline", description="Run every stage end to end.")
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--corpus", required=True, type=Path)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fresh", action="store_true", help="ignore existing stage outputs")
    ap.add_argument("--stop-after", choices=["ref"])
    args = ap.parse_args(argv)
    rc = RunConfig.load(args.config, args.set)
    res = experiment(args.out, args.corpus, rc, args.seed, resume=not args.fresh, stop_after=args.stop_after)
    print(json.dumps({k: v for k, v in res.items() if k != "probe_curves"}, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
