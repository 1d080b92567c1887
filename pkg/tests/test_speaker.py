import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsatok.speaker import AttnPool, RefStyleEncoder, speaker_loss
from dsatok.tensor import Tensor, backward, precision


def pool_reference(pool: AttnPool, x: np.ndarray, length: int) -> np.ndarray:
    """Direct float64 evaluation of masked attentive statistics pooling for one sequence."""
    W1, b1 = pool.w1.w.data.T.astype(np.float64), pool.w1.b.data.astype(np.float64)
    W2, b2 = pool.w2.w.data.T.astype(np.float64), pool.w2.b.data.astype(np.float64)
    Wp, bp = pool.proj.w.data.T.astype(np.float64), pool.proj.b.data.astype(np.float64)
    X = x[:length].astype(np.float64).T  # (D, T) columns are frames
    S = W2 @ np.tanh(W1 @ X + b1[:, None]) + b2[:, None]
    A = np.exp(S - S.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    mu = (A * X).sum(axis=1)
    sigma = np.sqrt((A * (X - mu[:, None]) ** 2).sum(axis=1) + 1e-5)
    return Wp @ np.concatenate([mu, sigma]) + bp


def test_attn_pool_oracle_20_cases():
    t0 = time.time()
    rng = np.random.default_rng(0)
    for case in range(20):
        D, Da, Do = rng.integers(2, 7), rng.integers(2, 7), rng.integers(2, 9)
        B, T = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        with precision(np.float64):
            pool = AttnPool(int(D), int(Da), int(Do), np.random.default_rng(case))
            x = rng.normal(size=(B, T, D))
            lengths = rng.integers(1, T + 1, size=B)
            h = pool(Tensor(x), lengths).data
        for b in range(B):
            np.testing.assert_allclose(h[b], pool_reference(pool, x[b], lengths[b]), atol=1e-6, rtol=0)
    assert time.time() - t0 < 1.0


def test_attn_pool_padding_invariance_bit_level():
    rng = np.random.default_rng(1)
    pool = AttnPool(8, 6, 5, rng)
    x = rng.normal(size=(3, 10, 8)).astype(np.float32)
    lengths = np.array([10, 4, 7])
    h1 = pool(Tensor(x), lengths).data
    y = x.copy()
    for b, n in enumerate(lengths):
        y[b, n:] = rng.normal(scale=100.0, size=y[b, n:].shape)
    h2 = pool(Tensor(y), lengths).data
    assert np.array_equal(h1, h2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 5), st.integers(0, 2 ** 31 - 1))
def test_attn_pool_padding_invariance_property(n, extra, seed):
    rng = np.random.default_rng(seed)
    pool = AttnPool(4, 3, 3, np.random.default_rng(0))
    x = rng.normal(size=(1, n + extra, 4)).astype(np.float32)
    short = pool(Tensor(x[:, :n].copy()), [n]).data
    x[:, n:] = rng.normal(scale=10, size=(1, extra, 4))
    assert np.array_equal(pool(Tensor(x), [n]).data, short)


def test_attn_pool_weights_sum_to_one_and_constant_input():
    pool = AttnPool(4, 3, 3, np.random.default_rng(0))
    x = np.tile(np.arange(4, dtype=np.float32), (2, 5, 1))
    mu, sigma = pool.stats(Tensor(x), [5, 2])
    np.testing.assert_allclose(mu.data, x[:, 0], rtol=1e-6)
    np.testing.assert_allclose(sigma.data, np.sqrt(1e-5), rtol=1e-3)


def test_attn_pool_rejects_bad_lengths():
    pool = AttnPool(4, 3, 3)
    with pytest.raises(ValueError):
        pool(Tensor(np.zeros((1, 3, 4))), [0])
    with pytest.raises(ValueError):
        pool(Tensor(np.zeros((1, 3, 4))), [4])


def test_speaker_loss_values():
    s = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert speaker_loss(s, Tensor(np.array([[3.0, 0.0], [0.0, 1.0]]))).item() == pytest.approx(0.0, abs=1e-6)
    assert speaker_loss(s, Tensor(np.array([[-1.0, 0.0], [1.0, 0.0]]))).item() == pytest.approx(1.5, abs=1e-6)


def test_speaker_loss_gradient_reaches_pool():
    rng = np.random.default_rng(0)
    pool = AttnPool(4, 3, 6, rng)
    loss = speaker_loss(rng.normal(size=(2, 6)), pool(Tensor(rng.normal(size=(2, 5, 4))), [5, 3]))
    backward(loss, pool.parameters())
    assert all(np.any(p.grad != 0) for p in pool.parameters())


def test_ref_encoder_shapes_unit_norm_and_guard():
    rng = np.random.default_rng(0)
    ref = RefStyleEncoder(80, 4, 16, rng)
    mel = Tensor(rng.normal(size=(2, 30, 80)))
    with pytest.raises(RuntimeError):
        ref(mel, [30, 11])
    e = ref.embed(mel, [30, 11]).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=1e-5)
    assert ref.logits(ref.embed(mel)).shape == (2, 4)
    ref.trained = True
    assert ref(mel, [30, 11]).shape == (2, 16)


def test_ref_encoder_ignores_padding():
    rng = np.random.default_rng(0)
    ref = RefStyleEncoder(8, 4, 16, rng)
    x = rng.normal(size=(1, 24, 8)).astype(np.float32)
    a = ref.embed(Tensor(x[:, :13].copy()), [13]).data
    x[:, 13:] = 50.0
    b = ref.embed(Tensor(x), [13]).data
    np.testing.assert_allclose(a, b, atol=1e-6)
