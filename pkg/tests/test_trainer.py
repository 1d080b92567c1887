import copy

import numpy as np
import pytest
from scipy import stats

from conftest import tiny_train_cfg
from dsatok import nn
from dsatok.model import Tokenizer
from dsatok.tensor import Tensor, backward
from dsatok.trainer import (RECOMBINATION, RECONSTRUCTION, JointTrainer, TrainConfig, TrainingError,
                            choose_mode, flow_loss, sample_tau, tau_bounds, total_loss)


# ---------------------------------------------------------------- protocol statistics

def test_mode_ratio_10k_draws():
    rng = np.random.default_rng(0)
    modes = [choose_mode(rng) for _ in range(10000)]
    frac = np.mean([m == RECOMBINATION for m in modes])
    assert 0.48 <= frac <= 0.52


def test_mode_determinism_and_degenerate_probabilities():
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert [choose_mode(r1) for _ in range(50)] == [choose_mode(r2) for _ in range(50)]
    r = np.random.default_rng(0)
    assert all(choose_mode(r, 1.0) == RECOMBINATION for _ in range(200))
    assert all(choose_mode(r, 0.0) == RECONSTRUCTION for _ in range(200))
    with pytest.raises(ValueError):
        choose_mode(r, 1.5)


def test_tau_range_and_errors():
    assert tau_bounds(100) == (25, 75)
    rng = np.random.default_rng(0)
    taus = [sample_tau(100, rng) for _ in range(2000)]
    assert min(taus) == 25 and max(taus) == 75
    with pytest.raises(ValueError):
        sample_tau(7, rng)
    assert 2 <= sample_tau(8, rng) <= 6


def test_tau_uniformity_chi_square():
    rng = np.random.default_rng(0)
    taus = np.array([sample_tau(100, rng) for _ in range(10000)])
    counts = np.bincount(taus - 25, minlength=51)
    assert len(counts) == 51
    assert stats.chisquare(counts).pvalue > 0.01


def test_total_loss_weighting():
    assert total_loss(0.3, 0.2) == pytest.approx(0.5)
    assert total_loss(0.3, 0.2, 0.5) == pytest.approx(0.4)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode_probability=1.2)
    with pytest.raises(ValueError):
        TrainConfig(tau_lo=0.8, tau_hi=0.5)
    with pytest.raises(ValueError):
        TrainConfig(max_frames=30)


# ---------------------------------------------------------------- loss masking

def test_flow_loss_gradient_is_zero_before_tau():
    rng = np.random.default_rng(0)
    v = Tensor(rng.normal(size=(2, 10, 3)), requires_grad=True)
    target = Tensor(rng.normal(size=(2, 10, 3)), requires_grad=True)
    taus = np.array([4, 7])
    mask = nn.time_mask([10, 9], 10) & ~nn.time_mask(taus, 10)
    loss = flow_loss(v, target, mask)
    backward(loss, [v, target])
    for b, tau in enumerate(taus):
        assert np.all(target.grad[b, :tau] == 0.0) and np.all(v.grad[b, :tau] == 0.0)
        assert np.any(target.grad[b, tau:9] != 0.0)
    assert np.all(target.grad[1, 9:] == 0.0)
    d = (v.data - target.data)[mask]
    assert loss.item() == pytest.approx(np.mean(d ** 2), rel=1e-5)
    with pytest.raises(TrainingError):
        flow_loss(v, target, np.zeros((2, 10), bool))


# ---------------------------------------------------------------- joint stage

def _trainer(tiny_stage, out=None, **kw):
    tok, tr, _ = tiny_stage
    tok = copy.deepcopy(tok)
    tok.joint = None
    return JointTrainer(tok, tr, tiny_train_cfg(**kw), out)


def test_requires_frozen_prerequisites(tiny_stage):
    tok, tr, _ = tiny_stage
    with pytest.raises(TrainingError):
        JointTrainer(Tokenizer(tok.norm, tok.semantic, None, None, tok.cfg), tr, tiny_train_cfg())


def test_recombination_with_tau_at_end_is_an_error(tiny_stage):
    jt = _trainer(tiny_stage)
    batch = jt.sample_batch()
    with pytest.raises(TrainingError):
        jt.losses(batch, RECOMBINATION, np.random.default_rng(0), taus=batch.lengths)


def test_single_step_decreases_loss_on_same_batch(tiny_stage):
    jt = _trainer(tiny_stage, lr=1e-3, warmup=1, cond_drop_p=0.0)
    batch = jt.sample_batch()
    before = jt.losses(batch, RECONSTRUCTION, np.random.default_rng(9))[2].item()
    jt.training_step(batch, RECONSTRUCTION)
    after = jt.losses(batch, RECONSTRUCTION, np.random.default_rng(9))[2].item()
    assert after < before


def test_frozen_modules_untouched(tiny_stage):
    jt = _trainer(tiny_stage)
    before = {k: v.copy() for k, v in jt.tok.semantic.state_dict().items()}
    before.update({"ref." + k: v.copy() for k, v in jt.tok.ref.state_dict().items()})
    for mode in (RECONSTRUCTION, RECOMBINATION, None):
        jt.training_step(mode=mode)
    after = dict(jt.tok.semantic.state_dict())
    after.update({"ref." + k: v for k, v in jt.tok.ref.state_dict().items()})
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_metrics_log_and_determinism(tiny_stage, tmp_path):
    a = _trainer(tiny_stage, tmp_path / "a")
    a.run()
    b = _trainer(tiny_stage, tmp_path / "b")
    b.run()
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert text.splitlines()[0] == "step,mode,l_fm,l_spk,l_total"
    assert len(text.splitlines()) == 5
    assert text == (tmp_path / "b" / "metrics.csv").read_text()
    assert (tmp_path / "a" / "last.dsat").read_bytes() == (tmp_path / "b" / "last.dsat").read_bytes()


def test_resume_reproduces_uninterrupted_run(tiny_stage, tmp_path):
    full = _trainer(tiny_stage, tmp_path / "full")
    full.run()
    part = _trainer(tiny_stage, tmp_path / "part")
    part.run(until=2)
    assert len((tmp_path / "part" / "metrics.csv").read_text().splitlines()) == 3
    resumed = _trainer(tiny_stage, tmp_path / "part")
    resumed.run(resume=True)
    assert resumed.step == 4
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()
    assert (tmp_path / "full" / "last.dsat").read_bytes() == (tmp_path / "part" / "last.dsat").read_bytes()


def test_checkpoint_loads_as_tokenizer(tiny_stage, tiny_corpus, tmp_path):
    jt = _trainer(tiny_stage, tmp_path)
    jt.run()
    tok, meta = Tokenizer.load(tmp_path / "last.dsat")
    assert meta["step"] == 4 and meta["has_joint"]
    _, mels, _, _, test = tiny_corpus
    m = mels[test[0].utt_id]
    zs, za = tok.encode_semantic([m]), tok.encode_acoustic([m])
    out = tok.decode(zs, za, steps=2)
    assert out[0].shape == (4 * len(zs[0]), 80)
    assert np.array_equal(out[0], tok.decode(zs, za, steps=2)[0])
    # recombination keeps the semantic source's length
    m2 = mels[test[-1].utt_id]
    rec = tok.decode(zs, tok.encode_acoustic([m2]), steps=2)[0]
    assert rec.shape == out[0].shape
