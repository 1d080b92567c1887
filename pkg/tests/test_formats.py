import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsatok import checkpoint
from dsatok.config import DEFAULTS, ConfigError, RunConfig
from dsatok.formats import (FormatError, TokenRecord, decode_mel, encode_mel, llm_line, read_tokens,
                            write_tokens)


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    arrays = {"b.w": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], np.float32),
              "scalar": np.float32(3.0) * np.ones(())}
    meta = {"step": 7, "name": "x"}
    checkpoint.save(tmp_path / "c.dsat", arrays, meta)
    back, m = checkpoint.load(tmp_path / "c.dsat")
    assert m == meta and set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].shape == np.shape(arrays[k])


def test_checkpoint_layout_header():
    blob = checkpoint.encode_arrays({"w": np.ones((2,), np.float32)})
    assert blob[:4] == b"DSAT"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    (n,) = struct.unpack_from("<H", blob, 12)
    assert blob[14:14 + n] == b"w"
    assert blob[14 + n] == 1  # rank
    assert struct.unpack_from("<I", blob, 15 + n)[0] == 2
    assert struct.unpack_from("<2f", blob, 19 + n) == (1.0, 1.0)


def test_checkpoint_corruption_detected(tmp_path):
    blob = bytearray(checkpoint.encode_arrays({"w": np.ones((4,), np.float32)}))
    blob[20] ^= 0xFF
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode_arrays(bytes(blob))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode_arrays(b"NOPE" + bytes(20))
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.dsat")


def test_checkpoint_atomic_write_leaves_no_temp(tmp_path):
    checkpoint.save(tmp_path / "c.dsat", {"w": np.zeros(3, np.float32)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.dsat"]


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abcdefgh._", min_size=1, max_size=8),
                       st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4),
       st.integers(0, 2 ** 31 - 1))
def test_checkpoint_property(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = {k: rng.normal(size=s).astype(np.float32) for k, s in shapes.items()}
    back, _ = checkpoint.decode_arrays(checkpoint.encode_arrays(arrays))
    assert set(back) == set(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])


# ---------------------------------------------------------------- token files

def test_token_line_format():
    r = TokenRecord("spk000_u0001", [5, 7], [[3, 1], [4, 2]])
    assert r.line() == "spk000_u0001\tS:5 7\tA:3 4|1 2"
    assert TokenRecord.parse(r.line()) == r


def test_llm_export_example():
    assert llm_line(TokenRecord("u", [5, 7], [[3]])) == "S5 S7 <SEP> A0_3"
    assert llm_line(TokenRecord("u", [1], [[3, 9], [4, 8]])) == "S1 <SEP> A0_3 A1_9 A0_4 A1_8"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1023), min_size=1, max_size=30), st.integers(1, 3),
       st.integers(1, 20), st.integers(0, 2 ** 31 - 1))
def test_token_file_roundtrip_property(sem, layers, Ta, seed):
    rng = np.random.default_rng(seed)
    r = TokenRecord("utt", sem, rng.integers(0, 65536, size=(Ta, layers)))
    assert TokenRecord.parse(r.line()) == r


def test_token_file_io_and_errors(tmp_path):
    recs = [TokenRecord("a", [1, 2], [[3]]), TokenRecord("b", [4], [[5], [6]])]
    write_tokens(tmp_path / "t.tsv", recs)
    assert read_tokens(tmp_path / "t.tsv") == recs
    for bad in ["a\tS:1\tX:2", "a\tS:1 x\tA:2", "a\tS:1\tA:1 2|3", "a\tS:\tA:1", "a\tS:1"]:
        with pytest.raises(FormatError):
            TokenRecord.parse(bad)
    with pytest.raises(FormatError):
        TokenRecord("a", [1024], [[0]]).check_ranges(1024, 65536)
    (tmp_path / "d.tsv").write_text("a\tS:1\tA:2\na\tS:1\tA:2\n")
    with pytest.raises(FormatError):
        read_tokens(tmp_path / "d.tsv")


# ---------------------------------------------------------------- mel dumps

def test_mel_dump_roundtrip_and_header():
    mel = np.random.default_rng(0).normal(size=(7, 80)).astype(np.float32)
    blob = encode_mel(mel)
    assert blob[:4] == b"MELS" and struct.unpack_from("<III", blob, 4) == (1, 7, 80)
    assert len(blob) == 16 + 7 * 80 * 4
    assert np.array_equal(decode_mel(blob), mel)
    with pytest.raises(FormatError):
        decode_mel(blob[:-4])
    with pytest.raises(FormatError):
        decode_mel(b"XXXX" + blob[4:])


# ---------------------------------------------------------------- run config

def test_run_config_defaults_and_overrides(tmp_path):
    rc = RunConfig()
    assert all(rc[k] == v for k, (v, _) in DEFAULTS.items())
    (tmp_path / "c.txt").write_text("# comment\ntrain.steps = 12\nprobe.lr=0.01\n")
    rc = RunConfig.load(tmp_path / "c.txt", ["train.steps=20"])
    assert rc["train.steps"] == 20 and rc["probe.lr"] == 0.01
    assert RunConfig.parse(rc.text()).values == rc.values
    assert rc.model().acoustic_fsq.codebook_size == 65536
    assert rc.train(3).seed == 3


def test_run_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.parse("train.nonsense=1")
    with pytest.raises(ConfigError):
        RunConfig.parse("train.steps=ten")
    with pytest.raises(ConfigError):
        RunConfig.parse("just words")
    for key in DEFAULTS:
        assert key.split(".")[0] in {"signal", "fsq", "dit", "train", "probe"}
