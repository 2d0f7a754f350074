import dataclasses
import struct
import zlib

import numpy as np
import pytest

from univl.config import FieldError
from univl.data import (
    CorpusSpec,
    FormatError,
    UnknownTokenError,
    Vocabulary,
    decode_features,
    encode_features,
    generate_corpus,
    read_annotations,
    read_corpus,
    read_features,
    write_corpus,
)
from univl.model import CLS, SEP


def test_spec_validation_names_the_field():
    with pytest.raises(FieldError, match="tokens_per_clip"):
        CorpusSpec(tokens_per_clip=(6, 40))
    with pytest.raises(FieldError, match="frames_per_clip"):
        CorpusSpec(frames_per_clip=(6, 60))
    with pytest.raises(FieldError, match="temporal_offset_prob"):
        CorpusSpec(temporal_offset_prob=1.5)


def test_noiseless_frames_sharing_a_concept_are_identical():
    c = generate_corpus(CorpusSpec(noise_sigma=0.0, temporal_offset_prob=0.0))
    by_concept = {}
    for r in c.records:
        for label, row in zip(r.frame_labels, r.frames):
            by_concept.setdefault(label, []).append(row)
    for rows in by_concept.values():
        assert all(np.array_equal(rows[0], x) for x in rows)


def test_same_seed_gives_byte_identical_files(tmp_path):
    a = write_corpus(generate_corpus(CorpusSpec(seed=3)), tmp_path / "a")
    b = write_corpus(generate_corpus(CorpusSpec(seed=3)), tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    other = write_corpus(generate_corpus(CorpusSpec(seed=4)), tmp_path / "c")
    assert any(x.read_bytes() != y.read_bytes() for x, y in zip(a, other))


def test_offset_rate_over_many_clips():
    spec = CorpusSpec(num_videos=250, val_videos=0, clips_per_video=4, temporal_offset_prob=0.3, num_concepts=24, seed=1)
    recs = generate_corpus(spec).records
    assert len(recs) == 1000
    swapped = np.mean([r.offset != 0 for r in recs])
    assert abs(swapped - 0.3) <= 0.03


def test_offset_text_comes_from_the_neighbour():
    c = generate_corpus(CorpusSpec(temporal_offset_prob=0.5, seed=2))
    vids = c.videos("train")
    for clips in vids.values():
        for r in clips:
            if r.offset:
                words = set(c.spec.concept_words()[i] for i in clips[r.clip_index + r.offset].concepts)
                assert words <= set(r.text.split())


def test_pairs_obey_invariants_and_caps():
    c = generate_corpus(CorpusSpec())
    for p in c.pairs("train") + c.pairs("val", "caption"):
        assert p.tokens[0] == CLS and p.tokens[-1] == SEP and p.tokens.count(SEP) == 1
        assert len(p.tokens) <= c.spec.max_text_len and p.frames.shape[0] <= c.spec.max_video_len
        assert np.all(np.isfinite(p.frames))
    assert len(c.split("train")) == 32 and len(c.split("val")) == 16


def test_tokenize_round_trips():
    vocab = generate_corpus(CorpusSpec()).vocab
    assert vocab.tokenize("") == [] and vocab.detokenize([]) == ""
    ids = vocab.tokenize("mix pour stir")
    assert len(ids) == 3 and vocab.detokenize(ids) == "mix pour stir"
    assert vocab.detokenize(vocab.tokenize("  mix   pour ")) == "mix pour"
    for r in generate_corpus(CorpusSpec()).records:
        assert vocab.detokenize(vocab.tokenize(r.text)) == r.text
        assert vocab.detokenize(vocab.tokenize(r.caption)) == r.caption
    with pytest.raises(UnknownTokenError, match="banana"):
        vocab.tokenize("mix banana")


def test_vocabulary_rejects_bad_tables():
    with pytest.raises(FormatError):
        Vocabulary(["a", "b"])
    good = Vocabulary.build(["x", "y"]).tokens
    with pytest.raises(FormatError, match="duplicate"):
        Vocabulary(good + ["x"])


def test_write_read_write_is_byte_identical(tmp_path):
    c = generate_corpus(CorpusSpec(seed=5))
    first = write_corpus(c, tmp_path / "one")
    back = read_corpus(tmp_path / "one")
    second = write_corpus(back, tmp_path / "two")
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(first, second))
    assert back.spec == c.spec and back.vocab.tokens == c.vocab.tokens
    for a, b in zip(c.records, back.records):
        assert a.annotation() == b.annotation() and a.frames.tobytes() == b.frames.tobytes()


def test_feature_format_errors():
    raw = encode_features([(0, np.ones((2, 3)))])
    assert decode_features(raw)[0][1].shape == (2, 3)
    with pytest.raises(FormatError, match="magic"):
        decode_features(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        decode_features(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(FormatError, match="truncated"):
        decode_features(raw[:30] + raw[-4:])
    flipped = bytearray(raw)
    flipped[30] ^= 1
    with pytest.raises(FormatError, match="CRC32"):
        decode_features(bytes(flipped))


def test_hand_written_feature_fixture(tmp_path):
    # magic, version 1, one clip; clip 7 with 2 frames of dim 2: [[1.5, -2], [0, 0.25]]
    body = (
        b"UVLF"
        + b"\x01\x00"
        + b"\x01\x00\x00\x00"
        + b"\x07\x00\x00\x00" + b"\x02\x00\x00\x00" + b"\x02\x00\x00\x00"
        + bytes.fromhex("000000000000f83f")
        + bytes.fromhex("00000000000000c0")
        + bytes.fromhex("0000000000000000")
        + bytes.fromhex("000000000000d03f")
    )
    path = tmp_path / "fixture.uvlf"
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    ((clip_index, frames),) = read_features(path)
    assert clip_index == 7
    assert frames.tolist() == [[1.5, -2.0], [0.0, 0.25]]


def test_annotation_field_order_is_enforced(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text('{"clip_index": 0, "video_id": "v"}\n')
    with pytest.raises(FormatError, match=":1:"):
        read_annotations(path)


def test_nearest_anchor_recovers_every_frame_concept():
    c = generate_corpus(CorpusSpec(noise_sigma=0.05, temporal_offset_prob=0.0))
    for r in c.records:
        d = ((r.frames[:, None, :] - c.anchors[None]) ** 2).sum(-1)
        assert np.array_equal(d.argmin(1), r.frame_labels)


def test_spec_is_a_frozen_value():
    spec = CorpusSpec()
    with pytest.raises(dataclasses.FrozenInstanceError):
        spec.seed = 3
