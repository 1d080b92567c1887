import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsatok import nn
from dsatok.decoder import (DitConfig, FlowDecoder, SemanticAdapter, cfg_velocity, controlnet_inject,
                            interpolate_path, target_velocity, timestep_embedding)
from dsatok.tensor import Tensor, ShapeError, no_grad, ops

TINY = DitConfig(n_blocks=2, dim=16, heads=2, ffn_inner=32, n_mels=6, cond_dim=8)


def activated(cfg=TINY, n_sem=12, seed=0):
    """A decoder whose zero-initialised layers are randomised, so outputs depend on inputs."""
    rng = np.random.default_rng(seed)
    dec = FlowDecoder(cfg, n_sem, rng)
    for p in dec.parameters():
        if not np.any(p.data):
            p.data = rng.normal(0, 0.2, size=p.data.shape).astype(np.float32)
    return dec


# ---------------------------------------------------------------- flow path

def test_path_endpoints_bit_exact():
    rng = np.random.default_rng(0)
    m0 = rng.normal(size=(2, 5, 6)).astype(np.float32)
    m = rng.normal(size=(2, 5, 6)).astype(np.float32)
    assert np.array_equal(interpolate_path(m0, m, 0.0), m0)
    assert np.array_equal(interpolate_path(m0, m, 1.0), m)
    per = interpolate_path(m0, m, np.array([0.0, 1.0], dtype=np.float32))
    assert np.array_equal(per[0], m0[0]) and np.array_equal(per[1], m[1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (3, 4), elements=st.floats(-10, 10, width=32)),
       arrays(np.float32, (3, 4), elements=st.floats(-10, 10, width=32)))
def test_path_endpoint_property(m0, m):
    assert np.array_equal(interpolate_path(m0, m, 0.0), m0)
    assert np.array_equal(interpolate_path(m0, m, 1.0), m)


def test_path_midpoint_and_velocity():
    m0, m = np.zeros((1, 2)), np.full((1, 2), 4.0)
    np.testing.assert_array_equal(interpolate_path(m0, m, 0.5), [[2.0, 2.0]])
    np.testing.assert_array_equal(target_velocity(m0, m), [[4.0, 4.0]])


def test_path_errors():
    with pytest.raises(ShapeError):
        interpolate_path(np.zeros((2, 3)), np.zeros((3, 2)), 0.5)
    with pytest.raises(ValueError):
        interpolate_path(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ShapeError):
        target_velocity(np.zeros(2), np.zeros(3))


def test_cfg_identities():
    rng = np.random.default_rng(0)
    vc, vu = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    assert np.array_equal(cfg_velocity(vc, vu, 0.0), vc)
    np.testing.assert_allclose(cfg_velocity(vc, vu, 2.0), 3 * vc - 2 * vu)
    assert np.array_equal(cfg_velocity(vc, vc, 5.0), vc)
    with pytest.raises(ValueError):
        cfg_velocity(vc, vu, -0.1)
    with pytest.raises(ShapeError):
        cfg_velocity(vc, vu[:1], 1.0)


def test_timestep_embedding_shape_and_distinct():
    e = timestep_embedding(np.array([0.0, 0.5, 1.0]), 16)
    assert e.shape == (3, 16)
    np.testing.assert_array_equal(e[0, :8], 1.0)
    assert np.abs(e[1] - e[2]).max() > 0.1


# ---------------------------------------------------------------- RoPE

@pytest.mark.parametrize("shift", [1, 7, 50])
def test_rope_self_attention_shift_invariance(shift):
    rng = np.random.default_rng(shift)
    att = nn.Attention(32, 4, rng)
    x = Tensor(rng.normal(size=(2, 12, 32)))
    pos = np.arange(12)
    base = att.logits(x, q_pos=pos, k_pos=pos).data
    moved = att.logits(x, q_pos=pos + shift, k_pos=pos + shift).data
    np.testing.assert_allclose(moved, base, atol=1e-5, rtol=0)


def test_rope_changes_logits_with_relative_offset():
    rng = np.random.default_rng(0)
    att = nn.Attention(16, 2, rng)
    x = Tensor(rng.normal(size=(1, 6, 16)))
    a = att.logits(x, q_pos=np.arange(6), k_pos=np.arange(6)).data
    b = att.logits(x, q_pos=np.arange(6), k_pos=np.arange(6) + 3).data
    assert np.abs(a - b).max() > 1e-3


def test_rope_cross_attention_shift_invariance():
    rng = np.random.default_rng(3)
    att = nn.Attention(16, 2, rng, kv_dim=8)
    x, kv = Tensor(rng.normal(size=(1, 9, 16))), Tensor(rng.normal(size=(1, 4, 8)))
    a = att.logits(x, kv, np.arange(9), np.arange(4)).data
    b = att.logits(x, kv, np.arange(9) + 7, np.arange(4) + 7).data
    np.testing.assert_allclose(a, b, atol=1e-5, rtol=0)


# ---------------------------------------------------------------- semantic adapter

def test_adapter_upsample_two_tokens_midpoint():
    ad = SemanticAdapter(5, 4, 8, np.random.default_rng(0))
    e = ad.upsample(np.array([[1, 3]]), 3).data
    tab = ad.codebook.table.data
    np.testing.assert_allclose(e[0, 0], tab[1], rtol=1e-6)
    np.testing.assert_allclose(e[0, 1], 0.5 * (tab[1] + tab[3]), rtol=1e-6)
    np.testing.assert_allclose(e[0, 2], tab[3], rtol=1e-6)


def test_adapter_batch_matches_per_row():
    ad = SemanticAdapter(9, 4, 8, np.random.default_rng(0))
    zs = [np.array([1, 2, 3]), np.array([4, 5, 6, 7, 8])]
    out = ad.upsample_batch(zs, np.array([12, 20])).data
    assert out.shape == (2, 20, 4)
    np.testing.assert_allclose(out[0, :12], ad.upsample(zs[0], 12).data[0], atol=1e-6)
    np.testing.assert_array_equal(out[0, 12:], 0.0)
    np.testing.assert_allclose(out[1], ad.upsample(zs[1], 20).data[0], atol=1e-6)


def test_adapter_errors():
    ad = SemanticAdapter(9, 4, 8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ad.upsample(np.zeros((1, 0), dtype=int), 4)
    with pytest.raises(ValueError):
        ad.upsample(np.array([1]), 0)


def test_controlnet_requires_equal_lengths():
    a, b = Tensor(np.zeros((1, 4, 3))), Tensor(np.ones((1, 4, 3)))
    np.testing.assert_array_equal(controlnet_inject(a, b).data, 1.0)
    with pytest.raises(ShapeError):
        controlnet_inject(Tensor(np.zeros((1, 5, 3))), b)


# ---------------------------------------------------------------- decoder

def _inputs(rng, B=2, T=8, Ta=3, cfg=TINY):
    m_t = Tensor(rng.normal(size=(B, T, cfg.n_mels)))
    e_a = Tensor(rng.normal(size=(B, Ta, cfg.cond_dim)))
    return m_t, e_a


def test_fresh_decoder_outputs_zero_velocity():
    rng = np.random.default_rng(0)
    dec = FlowDecoder(TINY, 12, rng)
    m_t, e_a = _inputs(rng)
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    v = dec(m_t, np.array([0.2, 0.9]), e_s, e_a)
    assert v.shape == (2, 8, 6)
    np.testing.assert_array_equal(v.data, 0.0)


def test_decoder_rejects_misaligned_semantic_condition():
    rng = np.random.default_rng(0)
    dec = activated()
    m_t, e_a = _inputs(rng)
    with pytest.raises(ShapeError):
        dec(m_t, np.array([0.1, 0.1]), dec.adapter.upsample(np.array([[1], [2]]), 7), e_a)


def test_acoustic_condition_length_is_free():
    rng = np.random.default_rng(0)
    dec = activated()
    m_t, _ = _inputs(rng)
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    for Ta in (1, 5, 40):
        assert dec(m_t, np.array([0.5, 0.5]), e_s, Tensor(rng.normal(size=(2, Ta, 8)))).shape == (2, 8, 6)


def test_kv_padding_does_not_change_output():
    rng = np.random.default_rng(0)
    dec = activated()
    m_t, e_a = _inputs(rng, Ta=5)
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    kv_mask = nn.time_mask([5, 2], 5)
    t = np.array([0.3, 0.6])
    with no_grad():
        a = dec(m_t, t, e_s, e_a, kv_mask=kv_mask).data
        garbage = e_a.data.copy()
        garbage[1, 2:] = 99.0
        b = dec(m_t, t, e_s, Tensor(garbage), kv_mask=kv_mask).data
        c = dec(Tensor(m_t.data[1:]), t[1:], e_s[1:], Tensor(e_a.data[1:, :2])).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a[1:], c, atol=1e-5)


def test_joint_drop_replaces_both_conditions():
    rng = np.random.default_rng(0)
    dec = activated()
    m_t, e_a = _inputs(rng)
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    drop = np.array([True, False])
    es_d, ea_d = dec.drop_conditions(e_s, e_a, drop)
    np.testing.assert_array_equal(es_d.data[0], np.broadcast_to(dec.null_s.data, (8, 8)))
    np.testing.assert_array_equal(ea_d.data[0], np.broadcast_to(dec.null_a.data, (3, 8)))
    np.testing.assert_array_equal(es_d.data[1], e_s.data[1])
    # dropped rows no longer depend on their conditions
    t = np.array([0.4, 0.4])
    with no_grad():
        v1 = dec(m_t, t, e_s, e_a, drop=drop).data
        v2 = dec(m_t, t, e_s * 3.0, e_a * -2.0, drop=drop).data
    np.testing.assert_allclose(v1[0], v2[0], atol=1e-6)
    assert np.abs(v1[1] - v2[1]).max() > 1e-4


def test_sample_omega_zero_equals_unguided_euler():
    rng = np.random.default_rng(0)
    dec = activated()
    _, e_a = _inputs(rng)
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    m0 = rng.normal(size=(2, 8, 6)).astype(np.float32)
    out = dec.sample(e_s, e_a, steps=3, omega=0.0, m0=m0)
    x = m0.copy()
    with no_grad():
        for k in range(3):
            x = x + (1 / 3) * dec(Tensor(x), np.full(2, k / 3), e_s, e_a).data
    np.testing.assert_array_equal(out, x)


def test_sample_deterministic_and_seed_sensitive():
    dec = activated()
    rng = np.random.default_rng(1)
    _, e_a = _inputs(rng)
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    a = dec.sample(e_s, e_a, steps=2, seed=5)
    assert np.array_equal(a, dec.sample(e_s, e_a, steps=2, seed=5))
    assert not np.array_equal(a, dec.sample(e_s, e_a, steps=2, seed=6))
    with pytest.raises(ValueError):
        dec.sample(e_s, e_a, steps=0)


def test_decoder_non_finite_input_raises():
    dec = activated()
    rng = np.random.default_rng(0)
    m_t, e_a = _inputs(rng)
    bad = m_t.data.copy()
    bad[0, 0, 0] = np.nan
    e_s = dec.adapter.upsample(np.array([[1, 2], [3, 4]]), 8)
    with pytest.raises(FloatingPointError):
        dec(Tensor(bad), np.array([0.5, 0.5]), e_s, e_a)
