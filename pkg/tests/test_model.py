import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from univl import tensor as F
from univl.model import (
    CheckpointError,
    ModelConfig,
    ModelParameters,
    decode_step_logits,
    encode_all,
    encode_cross,
    encode_text,
    encode_video,
    joint_embeddings,
    load_checkpoint,
    save_checkpoint,
)
from univl.tensor import Tensor

from .conftest import sampled_gradcheck, scramble, tiny_config, tiny_params

FIXTURES = Path(__file__).parent / "fixtures"


def toks_and_frames(rng, B=2, n=5, m=4, d_f=4, V=16):
    toks = np.concatenate([np.ones((B, 1), int), rng.integers(6, V, size=(B, n - 1))], axis=1)
    return toks, rng.standard_normal((B, m, d_f))


def test_config_rejects_bad_specials_and_heads():
    with pytest.raises(ValueError, match="distinct"):
        tiny_config(cls_id=0)
    with pytest.raises(ValueError, match=r"\[0, 16\)"):
        tiny_config(eos_id=16)
    with pytest.raises(ValueError):
        tiny_config(heads=3)
    with pytest.raises(ValueError):
        tiny_config(max_text_len=0)


def test_shapes(rng):
    p = tiny_params()
    toks, frames = toks_and_frames(rng, n=6, m=3)
    enc = encode_all(toks, None, frames, None, p)
    assert enc.T.shape == (2, 6, 8) and enc.V.shape == (2, 3, 8)
    assert enc.M.shape == (2, 9, 8)
    assert encode_text(toks[0], None, p).shape == (6, 8)
    assert encode_video(frames[0], None, p).shape == (3, 8)
    logits = decode_step_logits([4, 7, 9], enc.M[0], enc.memory_keep()[0], p)
    assert logits.shape == (3, 16)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000))
def test_memory_row_count_is_n_plus_m(n, m, seed):
    rng = np.random.default_rng(seed)
    p = tiny_params()
    toks, frames = toks_and_frames(rng, B=1, n=n, m=m)
    assert encode_all(toks, None, frames, None, p).M.shape[-2] == n + m


def test_input_errors(rng):
    p = tiny_params()
    with pytest.raises(IndexError):
        encode_text([1, 16, 2], None, p)
    with pytest.raises(ValueError, match="feature dim"):
        encode_video(np.zeros((3, 5)), None, p)
    with pytest.raises(ValueError, match="max_text_len"):
        encode_text([1] * 9, None, p)
    M = Tensor(np.zeros((3, 8)))
    with pytest.raises(ValueError, match="BOS"):
        decode_step_logits([5, 6], M, np.ones(3, bool), p)
    with pytest.raises(ValueError, match="max_gen_len"):
        decode_step_logits([4] * 9, M, np.ones(3, bool), p)
    with pytest.raises(ValueError):
        joint_embeddings(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), [False, False], [True, True])


def test_text_padding_isolation(rng):
    p = scramble(tiny_params())
    toks = np.array([[1, 7, 8, 2, 0, 0]])
    keep = toks != 0
    base = encode_text(toks, keep, p).data
    toks2 = toks.copy()
    toks2[0, 4:] = [13, 11]
    again = encode_text(toks2, keep, p).data
    assert np.array_equal(base[keep], again[keep])


def test_video_padding_isolation_and_zero_frames(rng):
    p = scramble(tiny_params())
    frames = rng.standard_normal((1, 5, 4))
    keep = np.array([[True, True, True, False, False]])
    base = encode_video(frames, keep, p).data
    frames2 = frames.copy()
    frames2[0, 3:] = 1e3
    assert np.array_equal(base[keep], encode_video(frames2, keep, p).data[keep])
    z = encode_video(np.zeros((4, 4)), None, p).data
    assert np.all(np.isfinite(z))
    assert not np.allclose(z[0], z[1])


def test_text_encoding_matches_golden_snapshot():
    golden = json.loads((FIXTURES / "golden_text_encoding.json").read_text())
    p = tiny_params(golden["seed"])
    toks = np.array(golden["tokens"])
    out = encode_text(toks, toks != 0, p).data
    np.testing.assert_allclose(out, np.array(golden["output"]), rtol=0, atol=1e-12)


def test_zero_cross_layers_is_plain_concatenation(rng):
    p = scramble(tiny_params(cross_layers=0, segment_embedding=False))
    toks, frames = toks_and_frames(rng)
    enc = encode_all(toks, None, frames, None, p)
    assert np.array_equal(enc.M.data, np.concatenate([enc.T.data, enc.V.data], axis=1))


def test_cross_encoder_mixes_modalities(rng):
    p = scramble(tiny_params())
    toks, frames = toks_and_frames(rng, B=1)
    base = encode_all(toks, None, frames, None, p)
    frames2 = frames.copy()
    frames2[0, 1] += 1.0
    moved = encode_all(toks, None, frames2, None, p)
    assert np.array_equal(base.T.data, moved.T.data)
    assert not np.allclose(base.text_rows().data, moved.text_rows().data)


def test_joint_embeddings_pool_over_real_rows(rng):
    row = rng.standard_normal((1, 8))
    t, v = joint_embeddings(Tensor(row), Tensor(np.vstack([row, row])), [True], [True, True])
    np.testing.assert_allclose(t.data, row[0], rtol=0, atol=0)
    np.testing.assert_allclose(v.data, row[0], rtol=0, atol=1e-15)
    T = rng.standard_normal((3, 8))
    padded = np.vstack([T, rng.standard_normal((2, 8))])
    a, _ = joint_embeddings(Tensor(T), Tensor(row), [True] * 3, [True])
    b, _ = joint_embeddings(Tensor(padded), Tensor(row), [True] * 3 + [False] * 2, [True])
    assert np.array_equal(a.data, b.data)


def test_decoder_logits_are_causal_in_the_prefix(rng):
    p = scramble(tiny_params())
    toks, frames = toks_and_frames(rng, B=1)
    enc = encode_all(toks, None, frames, None, p)
    a = decode_step_logits([4, 7, 9, 11], enc.M[0], enc.memory_keep()[0], p).data
    b = decode_step_logits([4, 7, 13, 6], enc.M[0], enc.memory_keep()[0], p).data
    assert np.array_equal(a[:2], b[:2])


def test_teacher_forcing_matches_incremental_decoding(rng):
    p = scramble(tiny_params())
    toks, frames = toks_and_frames(rng, B=1)
    enc = encode_all(toks, None, frames, None, p)
    prefix = [4, 10, 7, 12, 9]
    full = decode_step_logits(prefix, enc.M[0], enc.memory_keep()[0], p).data
    for i in range(1, len(prefix) + 1):
        step = decode_step_logits(prefix[:i], enc.M[0], enc.memory_keep()[0], p).data
        np.testing.assert_allclose(step[-1], full[i - 1], rtol=0, atol=1e-12)


def hand_count(c: ModelConfig) -> int:
    d, f, V, K, df = c.hidden, c.ffn_size, c.vocab_size, c.num_frame_labels, c.video_feature_dim
    lin = lambda i, o: i * o + o
    ln = 2 * d
    attn = 4 * lin(d, d)
    ffn = lin(d, f) + lin(f, d)
    enc_layer = attn + ln + ffn + ln
    dec_layer = 2 * attn + 3 * ln + ffn
    text = V * d + c.max_text_len * d + ln + c.text_layers * enc_layer
    video = lin(df, d) + c.max_video_len * d + ln + c.video_layers * enc_layer
    cross = (2 * d if c.segment_embedding else 0) + c.cross_layers * enc_layer
    decoder = V * d + c.max_gen_len * d + ln + c.decoder_layers * dec_layer
    heads = lin(d, d) + lin(d, 1) + lin(d, V) + lin(df, d) + lin(d, V) + lin(d, K) + lin(d, 1)
    return text + video + cross + decoder + heads


@pytest.mark.parametrize("config", [tiny_config(), ModelConfig(), tiny_config(text_layers=2, cross_layers=0, segment_embedding=False)])
def test_parameter_count_matches_hand_formula(config):
    assert ModelParameters.init(config, 0).count() == hand_count(config)


def test_every_parameter_requires_grad_and_init_is_seeded():
    a, b = tiny_params(3), tiny_params(3)
    assert all(t.requires_grad for _, t in a.items())
    assert a.digest() == b.digest() != tiny_params(4).digest()


def test_full_model_gradient_of_sum_m():
    rng = np.random.default_rng(5)
    p = scramble(tiny_params())
    toks, frames = toks_and_frames(rng, n=4, m=3)
    tk = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], bool)
    vk = np.array([[1, 1, 1], [1, 1, 0]], bool)
    fn = lambda: F.total(encode_all(toks, tk, frames, vk, p).M)
    used = [(n, t) for n, t in p.items() if n.startswith(("text.", "video.", "cross."))]
    err, name = sampled_gradcheck(fn, used, per_tensor=12)
    assert err < 1e-3, name


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    p = scramble(tiny_params(2))
    path = tmp_path / "m.uvlc"
    save_checkpoint(path, p, {"note": "x"}, {"adam.m": np.arange(3.0)})
    q, meta, extra = load_checkpoint(path)
    assert q.config == p.config and meta == {"note": "x"}
    np.testing.assert_array_equal(extra["adam.m"], np.arange(3.0))
    for name, t in p.items():
        assert t.data.tobytes() == q[name].data.tobytes()
    toks, frames = toks_and_frames(rng)
    a = encode_all(toks, None, frames, None, p).M.data
    b = encode_all(toks, None, frames, None, q).M.data
    assert a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "again.uvlc", q, {"note": "x"}, {"adam.m": np.arange(3.0)})
    assert path.read_bytes() == (tmp_path / "again.uvlc").read_bytes()


def test_checkpoint_corruption_is_detected(tmp_path):
    path = tmp_path / "m.uvlc"
    save_checkpoint(path, tiny_params(), {})
    raw = bytearray(path.read_bytes())
    (tmp_path / "magic.uvlc").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.uvlc")
    raw[200] ^= 0xFF
    (tmp_path / "flip.uvlc").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip.uvlc")
    with pytest.raises(CheckpointError):
        (tmp_path / "short.uvlc").write_bytes(b"UVLC")
        load_checkpoint(tmp_path / "short.uvlc")


def test_encodings_in_batch_match_single_examples(rng):
    p = scramble(tiny_params())
    toks, frames = toks_and_frames(rng)
    batch = encode_all(toks, None, frames, None, p).M.data
    for b in range(2):
        single = encode_all(toks[b : b + 1], None, frames[b : b + 1], None, p).M.data
        np.testing.assert_allclose(batch[b], single[0], rtol=0, atol=1e-12)
