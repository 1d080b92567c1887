import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsatok.probe import (CONTENT, RECOMBINATION, RECONSTRUCTION, SPEAKER, EvalReport, Probe, ProbeConfig,
                          ProbeReport, TokenSet, cross_speaker_pairs, edit_distance, error_rate, eval_suite,
                          label_tokens, token_set, train_probe)
from dsatok.signal import StyleParams, Utterance

seqs = st.lists(st.integers(0, 3), max_size=8)


def test_edit_distance_examples():
    assert edit_distance("abc", "abc") == 0
    assert edit_distance("abc", "axc") == 1
    assert edit_distance("", "ab") == 2
    assert edit_distance([1, 2, 3], [3, 2, 1]) == 2


@settings(max_examples=150, deadline=None)
@given(seqs, seqs, seqs)
def test_edit_distance_metric_axioms(a, b, c):
    d = edit_distance
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)
    assert abs(len(a) - len(b)) <= d(a, b) <= max(len(a), len(b))


def test_error_rate():
    assert error_rate([[1, 2], [3]], [[1, 2], [4]]) == pytest.approx(1 / 3)
    assert error_rate([[1, 1, 1, 1]], [[2]]) == 4.0
    with pytest.raises(ValueError):
        error_rate([[]], [[]])


# ---------------------------------------------------------------- synthetic label data

def _utts(n_spk=4, per=24, K=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_spk):
        style = StyleParams(s, 100.0 + 5 * s, -3.0, 5.0, 20.0, 0.5)
        for u in range(per):
            content = tuple(int(c) for c in rng.integers(0, K, size=rng.integers(2, 6)))
            out.append(Utterance(f"spk{s:03d}_u{u:04d}", "x.wav", content, style))
    return out


def _split(utts, per=24):
    tr, va, te = [], [], []
    for i, u in enumerate(utts):
        (tr if i % per < per - 8 else va if i % per < per - 4 else te).append(u)
    return tr, va, te


def test_token_set_validation():
    with pytest.raises(ValueError):
        TokenSet([], [], (4,), [], [])
    with pytest.raises(ValueError):
        TokenSet(["a"], [np.array([[5]])], (4,), [(1,)], [0])
    with pytest.raises(ValueError):
        TokenSet(["a"], [np.array([[1, 1]])], (4,), [(1,)], [0])


def test_content_probe_learns_replayed_labels():
    utts = _utts()
    tr, va, te = (label_tokens(s, 6) for s in _split(utts))
    probe, res = train_probe(tr, va, CONTENT, K=6, cfg=ProbeConfig(epochs=15, batch_size=8, lr=5e-3))
    assert probe.score(te) < 0.02
    assert res.best_epoch == int(np.argmin(res.curve))


def test_speaker_probe_on_labels_is_chance_and_on_speaker_tokens_is_perfect():
    utts = _utts(n_spk=4, per=24)
    tr_u, va_u, te_u = _split(utts)
    tr, va, te = (label_tokens(s, 6) for s in (tr_u, va_u, te_u))
    cfg = ProbeConfig(epochs=4, batch_size=8, lr=5e-3)
    p, _ = train_probe(tr, va, SPEAKER, K=6, cfg=cfg)
    assert p.score(te) <= 0.5  # labels carry no speaker information (chance 0.25)
    spk_tok = {u.utt_id: np.full((5, 1), u.speaker_id) for u in utts}
    sets = [token_set(s, spk_tok, (4,)) for s in (tr_u, va_u, te_u)]
    p2, _ = train_probe(sets[0], sets[1], SPEAKER, K=6, cfg=cfg)
    assert p2.score(sets[2]) == 1.0


def test_probe_is_deterministic_and_saves(tmp_path):
    tr, va, _ = (label_tokens(s, 6) for s in _split(_utts()))
    cfg = ProbeConfig(epochs=2, batch_size=8)
    p1, r1 = train_probe(tr, va, CONTENT, K=6, cfg=cfg)
    p2, r2 = train_probe(tr, va, CONTENT, K=6, cfg=cfg)
    assert r1.curve == r2.curve
    p1.save(tmp_path / "p.dsat")
    back = Probe.load(tmp_path / "p.dsat")
    assert back.predict(va) == p1.predict(va)


def test_multi_layer_tokens_are_summed():
    tr_u, va_u, _ = _split(_utts())
    rng = np.random.default_rng(0)
    toks = {u.utt_id: rng.integers(0, 7, size=(6, 3)) for u in tr_u + va_u}
    tr, va = token_set(tr_u, toks, (7, 7, 7)), token_set(va_u, toks, (7, 7, 7))
    probe, _ = train_probe(tr, va, SPEAKER, K=6, cfg=ProbeConfig(epochs=1))
    assert len(probe.model.embeddings) == 3


def test_probe_rejects_empty():
    tr = label_tokens(_utts()[:4], 6)
    with pytest.raises(ValueError):
        label_tokens([], 6)
    assert len(tr) == 4


def test_pairs_are_cross_speaker_and_seeded():
    utts = _utts()
    pairs = cross_speaker_pairs(utts, 50, seed=1)
    assert len(pairs) == 50 and all(a.speaker_id != b.speaker_id for a, b in pairs)
    assert [(a.utt_id, b.utt_id) for a, b in pairs] == \
        [(a.utt_id, b.utt_id) for a, b in cross_speaker_pairs(utts, 50, seed=1)]


def test_reports_format():
    r = ProbeReport(0.1, 0.05, 0.9, 0.95)
    assert r.csv().splitlines()[0] == "stream,content_er,speaker_acc"
    assert "semantic" in r.table() and "acoustic" in r.table()
    e = EvalReport(RECOMBINATION, 3, 0.2, 0.8, 0.3)
    assert e.style_margin == pytest.approx(0.5)
    assert e.csv().splitlines()[0].startswith("mode,n,content_error_rate")


# ---------------------------------------------------------------- generation suite on a tiny model

@pytest.fixture(scope="module")
def tiny_model(tiny_stage):
    import copy
    from conftest import tiny_train_cfg
    from dsatok.trainer import JointTrainer
    tok, tr, _ = tiny_stage
    tok = copy.deepcopy(tok)
    JointTrainer(tok, tr, tiny_train_cfg(steps=2)).run()
    return tok


def _content_probe(tok, corpus):
    manifest, mels, train, val, test = corpus
    enc = {u.utt_id: z[:, None] for u, z in zip(train + val, tok.encode_semantic([mels[u.utt_id] for u in
                                                                                  train + val]))}
    vocab = (tok.cfg.semantic_fsq.codebook_size,)
    probe, _ = train_probe(token_set(train, enc, vocab), token_set(val, enc, vocab), CONTENT, K=16,
                           cfg=ProbeConfig(epochs=1))
    return probe


def test_eval_suite_degenerate_pairing_matches_reconstruction(tiny_model, tiny_corpus):
    manifest, mels, train, val, test = tiny_corpus
    probe = _content_probe(tiny_model, tiny_corpus)
    pairs = [(u, u) for u in test[:3]]
    rec = eval_suite(tiny_model, mels, pairs, probe, RECONSTRUCTION, steps=2, seed=4)
    same = eval_suite(tiny_model, mels, pairs, probe, RECOMBINATION, steps=2, seed=4, allow_same_speaker=True)
    assert rec.content_error_rate == same.content_error_rate
    assert rec.style_sim_to_acoustic_source == same.style_sim_to_acoustic_source
    assert rec.mel_recon_mse is not None and rec.mel_recon_mse >= 0
    assert -1 <= rec.style_sim_to_semantic_source <= 1


def test_eval_suite_pairing_errors(tiny_model, tiny_corpus):
    manifest, mels, train, val, test = tiny_corpus
    probe = _content_probe(tiny_model, tiny_corpus)
    same_spk = [(test[0], test[1])]
    assert test[0].speaker_id == test[1].speaker_id
    with pytest.raises(ValueError):
        eval_suite(tiny_model, mels, same_spk, probe, RECOMBINATION, steps=1)
    with pytest.raises(ValueError):
        eval_suite(tiny_model, mels, [(test[0], test[-1])], probe, RECONSTRUCTION, steps=1)
    with pytest.raises(ValueError):
        eval_suite(tiny_model, mels, [], probe, RECOMBINATION, steps=1)


def test_random_tokens_give_chance_speaker_accuracy():
    """Tokens independent of the speaker: 32-way accuracy stays within 3 points of 1/32."""
    rng = np.random.default_rng(3)
    utts = _utts(n_spk=32, per=22, seed=3)
    tr_u, va_u, te_u = _split(utts, per=22)
    toks = {u.utt_id: rng.integers(0, 64, size=(int(rng.integers(8, 20)), 1)) for u in utts}
    sets = [token_set(s, toks, (64,)) for s in (tr_u, va_u, te_u)]
    probe, _ = train_probe(sets[0], sets[1], SPEAKER, K=6, cfg=ProbeConfig(epochs=2, batch_size=32))
    assert abs(probe.score(sets[2]) - 1 / 32) <= 0.03


def test_untrained_decoder_gives_degenerate_content(tiny_stage, tiny_corpus):
    import copy
    from dsatok.model import JointModel
    manifest, mels, train, val, test = tiny_corpus
    tok = copy.deepcopy(tiny_stage[0])
    tok.joint = JointModel(tok.cfg, np.random.default_rng(0))
    probe = _content_probe(tok, tiny_corpus)
    rep = eval_suite(tok, mels, [(u, u) for u in test], probe, RECONSTRUCTION, steps=2, seed=0)
    assert rep.content_error_rate >= 0.9
