"""Command-line entry point: ``dsatok <command> [flags]``.

Exit status: 0 success, 1 usage error, 2 runtime or data error. Diagnostics
go to standard error. All randomness derives from ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import DEFAULTS, ConfigError, RunConfig
from .formats import FormatError, llm_line, read_tokens, write_mel, write_tokens
from .model import Tokenizer
from .pipeline import (Data, StageError, prepare, require, run_eval, run_probes, stage_joint, stage_ref,
                       stage_semantic, stream_sets, tokenize)
from .probe import CONTENT, RECOMBINATION, RECONSTRUCTION, Probe
from .signal import MelConfig, build_corpus, griffin_lim, read_wav, stft_mel, write_wav

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_help() -> str:
    return "config keys (namespace.key=default):\n" + "\n".join(
        f"  {k}={v}  {h}" for k, (v, h) in DEFAULTS.items())


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dsatok", description="Dual-stream speech tokenizer toolkit.",
                 epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", type=Path, help="key=value run config file (default: built-in defaults)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable, wins over --config")
        p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
        return p

    p = cmd("synth-corpus", "render the synthetic corpus and its manifest")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmd("train-semantic", "train the CTC-supervised semantic tokenizer")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")

    p = cmd("train-ref-encoder", "train the reference style encoder (needs a semantic checkpoint)")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint from train-semantic")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")

    p = cmd("train", "joint training of acoustic tokenizer, decoder and speaker head")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint from train-ref-encoder")
    p.add_argument("--out", type=Path, required=True,
                   help="run directory (metrics.csv, last.dsat, model.dsat)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.dsat")

    p = cmd("tokenize", "write semantic and acoustic tokens for utterances")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, help="corpus directory (tokenizes --split)")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--wav", type=Path, nargs="*", default=[], help="WAV files (id = file stem)")
    p.add_argument("--out", type=Path, required=True, help="token file")

    p = cmd("reconstruct", "decode one utterance's own tokens back to a mel (and WAV)")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--tokens", type=Path, required=True, help="token file from `tokenize`")
    p.add_argument("--utt", required=True, help="utterance id in the token file")
    p.add_argument("--out", type=Path, required=True, help="mel dump path")
    p.add_argument("--wav", type=Path, help="also write a Griffin-Lim WAV here")
    p.add_argument("--steps", type=int, help="Euler steps (default dit.sample_steps)")

    p = cmd("recombine", "semantic tokens of one utterance with acoustic tokens of another")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--semantic-src", required=True, help="utterance id (needs --corpus) or WAV path")
    p.add_argument("--acoustic-src", required=True, help="utterance id (needs --corpus) or WAV path")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output prefix: writes <out>.mels and <out>.wav")
    p.add_argument("--steps", type=int)

    p = cmd("probe", "train content and speaker probes on both token streams")
    p.add_argument("--ckpt", type=Path, help="tokenizer checkpoint (tokenizes the corpus)")
    p.add_argument("--tokens", type=Path, help="probe an existing token file instead")
    p.add_argument("--corpus", type=Path, required=True, help="corpus with labels and splits")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmd("eval", "reconstruction or recombination metric suite")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--probe", type=Path, required=True, help="content_probe.dsat from `probe`")
    p.add_argument("--mode", choices=[RECONSTRUCTION, RECOMBINATION], required=True)
    p.add_argument("--pairs", type=int, help="number of random pairs (default probe.pairs)")
    p.add_argument("--pair", action="append", default=[], metavar="A,B",
                   help="explicit (semantic source, acoustic source) pair; repeatable")
    p.add_argument("--allow-same-speaker", action="store_true", help="permit same-speaker recombination pairs")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmd("gradcheck", "run every registered finite-difference suite")
    p.add_argument("--only", nargs="*", help="suite names (default: all)")

    p = cmd("export-llm", "token file -> one LLM training sequence per utterance")
    p.add_argument("--tokens", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return ap


# ---------------------------------------------------------------- helpers

def _load_tok(path: Path, *stages: str) -> Tokenizer:
    tok, meta = Tokenizer.load(path)
    require(meta, *stages)
    return tok


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _mel_of(src: str, data: Data | None) -> tuple[str, np.ndarray]:
    path = Path(src)
    if src.lower().endswith(".wav"):
        if not path.exists():
            raise FileNotFoundError(f"no such WAV file: {src}")
        return path.stem, stft_mel(read_wav(path), MelConfig()).frames
    if data is None:
        raise UsageError(f"{src!r} looks like an utterance id; pass --corpus")
    if src not in data.mels:
        raise KeyError(f"unknown utterance id {src!r}")
    return src, data.mels[src]


def _write_audio(prefix_mel: Path, wav: Path | None, mel: np.ndarray, seed: int) -> None:
    write_mel(prefix_mel, mel)
    if wav is not None:
        write_wav(wav, griffin_lim(mel, MelConfig(), iters=32, seed=seed))


# ---------------------------------------------------------------- commands

def cmd_synth_corpus(a, rc):
    m = build_corpus(a.out, rc["signal.n_speakers"], rc["signal.utts_per_speaker"], rc["signal.K"], a.seed)
    _say(f"wrote {len(m.utterances)} utterances to {a.out}")


def cmd_train_semantic(a, rc):
    data = prepare(a.corpus, rc)
    tok, rep = stage_semantic(data, rc, a.seed, _say)
    tok.save(a.out, {"stage": "semantic", "report": rep})
    print(json.dumps(rep, indent=2))


def cmd_train_ref(a, rc):
    tok, meta = Tokenizer.load(a.ckpt)
    data = prepare(a.corpus, rc)
    rep = stage_ref(tok, data, rc, a.seed, _say)
    tok.save(a.out, {"stage": "ref", "report": rep})
    print(json.dumps(rep, indent=2))


def cmd_train(a, rc):
    tok = _load_tok(a.ckpt, "ref")
    data = prepare(a.corpus, rc)
    last = stage_joint(tok, data, rc, a.seed, a.out, resume=a.resume, progress=_say)
    tok.save(a.out / "model.dsat", {"stage": "joint"})
    _say(f"checkpoint {last}; tokenizer {a.out / 'model.dsat'}")


def cmd_tokenize(a, rc):
    tok = _load_tok(a.ckpt, "joint")
    ids, mels = [], []
    if a.corpus is not None:
        data = prepare(a.corpus, rc)
        for u in data.split(a.split):
            ids.append(u.utt_id)
            mels.append(data.mels[u.utt_id])
    for w in a.wav:
        uid, mel = _mel_of(str(w), None)
        ids.append(uid)
        mels.append(mel)
    if not ids:
        raise UsageError("nothing to tokenize: pass --corpus and/or --wav")
    write_tokens(a.out, tokenize(tok, mels, ids))
    _say(f"wrote {len(ids)} token records to {a.out}")


def cmd_reconstruct(a, rc):
    tok = _load_tok(a.ckpt, "joint")
    recs = {r.utt_id: r for r in read_tokens(a.tokens)}
    if a.utt not in recs:
        raise KeyError(f"utterance {a.utt!r} not in {a.tokens}")
    r = recs[a.utt]
    r.check_ranges(tok.cfg.semantic_fsq.codebook_size, tok.cfg.acoustic_fsq.codebook_size)
    mel = tok.decode([r.semantic], [r.acoustic], steps=a.steps or rc["dit.sample_steps"],
                     omega=rc["dit.omega"], seed=a.seed)[0]
    _write_audio(a.out, a.wav, mel, a.seed)


def cmd_recombine(a, rc):
    tok = _load_tok(a.ckpt, "joint")
    data = prepare(a.corpus, rc) if a.corpus else None
    _, mel_a = _mel_of(a.semantic_src, data)
    _, mel_b = _mel_of(a.acoustic_src, data)
    zs = tok.encode_semantic([mel_a])
    za = tok.encode_acoustic([mel_b])
    mel = tok.decode(zs, za, steps=a.steps or rc["dit.sample_steps"], omega=rc["dit.omega"], seed=a.seed)[0]
    out = Path(str(a.out))
    _write_audio(out.with_name(out.name + ".mels"), out.with_name(out.name + ".wav"), mel, a.seed)
    _say(f"{len(mel)} frames from {len(zs[0])} semantic and {len(za[0])} acoustic tokens")


def cmd_probe(a, rc):
    if (a.ckpt is None) == (a.tokens is None):
        raise UsageError("pass exactly one of --ckpt or --tokens")
    data = prepare(a.corpus, rc)
    if a.ckpt is not None:
        tok = _load_tok(a.ckpt, "joint")
        utts = data.train + data.val + data.test
        recs = {r.utt_id: r for r in tokenize(tok, [data.mels[u.utt_id] for u in utts], [u.utt_id for u in utts])}
        vocab = (tok.cfg.semantic_fsq.codebook_size, tok.cfg.acoustic_fsq.codebook_size)
    else:
        recs = {r.utt_id: r for r in read_tokens(a.tokens)}
        vocab = (None, None)
    streams = stream_sets(recs, data, *vocab)
    report, probes, curves = run_probes(streams, rc["signal.K"], rc, a.seed, _say)
    a.out.mkdir(parents=True, exist_ok=True)
    (a.out / "probe_report.csv").write_text(report.csv())
    (a.out / "probe_report.txt").write_text(report.table() + "\n")
    (a.out / "probe_curves.json").write_text(json.dumps(curves, indent=2))
    probes[("semantic", CONTENT)].save(a.out / "content_probe.dsat")
    print(report.table())


def cmd_eval(a, rc):
    tok = _load_tok(a.ckpt, "joint")
    data = prepare(a.corpus, rc)
    probe = Probe.load(a.probe)
    pairs = None
    if a.pair:
        by_id = data.manifest.by_id()
        pairs = []
        for item in a.pair:
            try:
                x, y = item.split(",")
                pairs.append((by_id[x], by_id[y]))
            except (ValueError, KeyError) as exc:
                raise UsageError(f"bad --pair {item!r}: expected two known ids A,B") from exc
        if a.mode == RECOMBINATION and not a.allow_same_speaker:
            same = [f"{x.utt_id},{y.utt_id}" for x, y in pairs if x.speaker_id == y.speaker_id]
            if same:
                raise ValueError(f"same-speaker pairs refused without --allow-same-speaker: {same[0]}")
    rep = run_eval(tok, data, probe, a.mode, rc, a.seed, n_pairs=a.pairs, pairs=pairs,
                   allow_same_speaker=a.allow_same_speaker, steps=a.steps)
    a.out.mkdir(parents=True, exist_ok=True)
    (a.out / f"eval_{a.mode}.csv").write_text(rep.csv())
    (a.out / f"eval_{a.mode}.txt").write_text(rep.table() + "\n")
    print(rep.table())


def cmd_gradcheck(a, rc):
    from .gradsuite import SUITES, TOLERANCE, run_all
    names = a.only or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites: {', '.join(unknown)} (have: {', '.join(SUITES)})")
    results = run_all(names)
    for name, (err, ok) in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name:<22} max rel err {err:.3e} (tol {TOLERANCE:g})")
    return EXIT_OK if all(ok for _, ok in results.values()) else EXIT_RUNTIME


def cmd_export_llm(a, rc):
    recs = read_tokens(a.tokens)
    Path(a.out).write_text("".join(llm_line(r) + "\n" for r in recs), encoding="utf-8")


COMMANDS = {
    "synth-corpus": cmd_synth_corpus, "train-semantic": cmd_train_semantic, "train-ref-encoder": cmd_train_ref,
    "train": cmd_train, "tokenize": cmd_tokenize, "reconstruct": cmd_reconstruct, "recombine": cmd_recombine,
    "probe": cmd_probe, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "export-llm": cmd_export_llm,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        rc = RunConfig.load(args.config, args.set)
    except UsageError as exc:
        _say(f"dsatok: error: {exc}")
        return EXIT_USAGE
    except ConfigError as exc:
        _say(f"dsatok: config error: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _say(f"dsatok: cannot read config: {exc}")
        return EXIT_USAGE
    try:
        code = COMMANDS[args.command](args, rc)
    except UsageError as exc:
        _say(f"dsatok {args.command}: error: {exc}")
        return EXIT_USAGE
    except (StageError, CheckpointError, FormatError, OSError, KeyError, ValueError, RuntimeError) as exc:
        _say(f"dsatok {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
