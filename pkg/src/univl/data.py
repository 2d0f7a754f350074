"""Synthetic paired clip-transcript corpora, the corpus-built vocabulary, and the on-disk formats.

Each clip is a short ordered list of *concepts*. Its frames are per-concept
anchor vectors plus gaussian noise, laid out as contiguous segments; its
transcript names the concepts among function-word filler; its caption is a
fixed template over the same concepts. With probability
``temporal_offset_prob`` a clip's transcript is replaced by a neighbouring
clip's, mimicking narration that runs ahead of or behind the video.

Corpus directory layout::

    spec.txt            canonical key = value dump of the CorpusSpec
    vocab.txt           one token per line, line number == id
    annotations.jsonl   one record per clip (see ANNOTATION_FIELDS)
    features/<video_id>.uvlf

Feature file (``.uvlf``), all integers little-endian::

    magic  b"UVLF"
    u16    format version (1)
    u32    clip count
    per clip: u32 clip_index, u32 m, u32 d_f, m*d_f float64 row-major
    u32    CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import FieldError, dump
from .model import CLS, PAD, SEP, SPECIAL_TOKENS
from .rng import make_rng

FEATURE_MAGIC = b"UVLF"
FEATURE_VERSION = 1
ANNOTATION_FIELDS = (
    "video_id",
    "clip_index",
    "split",
    "text",
    "caption",
    "concepts",
    "frame_labels",
    "sentiment",
    "offset",
)

CONCEPT_WORDS = (
    "pour", "stir", "mix", "chop", "slice", "boil", "fry", "bake",
    "whisk", "peel", "grate", "season", "knead", "roll", "drain", "serve",
    "rinse", "melt", "simmer", "toast", "mash", "blend", "grill", "steam",
)
FUNCTION_WORDS = ("the", "a", "we", "now", "just", "so", "okay", "and", "it", "this", "little", "some")
CAPTION_WORDS = ("first", "then", "done")


class FormatError(ValueError):
    pass


class UnknownTokenError(KeyError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    num_videos: int = 8
    val_videos: int = 4
    clips_per_video: int = 4
    concepts_per_clip: Tuple[int, int] = (2, 3)
    tokens_per_clip: Tuple[int, int] = (6, 10)
    frames_per_clip: Tuple[int, int] = (6, 12)
    num_concepts: int = 16
    num_function_words: int = 12
    feature_dim: int = 32
    noise_sigma: float = 0.05
    temporal_offset_prob: float = 0.2
    sentiment_noise: float = 0.1
    seed: int = 0
    max_text_len: int = 32
    max_video_len: int = 48
    vocab_capacity: int = 256

    def __post_init__(self):
        def need(ok, name, msg):
            if not ok:
                raise FieldError(name, msg)

        need(self.num_videos >= 1, "num_videos", "must be at least 1")
        need(self.val_videos >= 0, "val_videos", "must be non-negative")
        need(self.clips_per_video >= 1, "clips_per_video", "must be at least 1")
        for name in ("concepts_per_clip", "tokens_per_clip", "frames_per_clip"):
            lo, hi = getattr(self, name)
            need(1 <= lo <= hi, name, f"range ({lo}, {hi}) must satisfy 1 <= min <= max")
        need(self.tokens_per_clip[1] + 2 <= self.max_text_len, "tokens_per_clip",
             f"max {self.tokens_per_clip[1]} plus [CLS]/[SEP] exceeds max_text_len {self.max_text_len}")
        need(self.frames_per_clip[1] <= self.max_video_len, "frames_per_clip",
             f"max {self.frames_per_clip[1]} exceeds max_video_len {self.max_video_len}")
        need(self.concepts_per_clip[1] <= self.tokens_per_clip[0], "concepts_per_clip",
             "a transcript must be able to name every concept of its clip")
        need(self.concepts_per_clip[1] <= self.frames_per_clip[0], "concepts_per_clip",
             "every concept needs at least one frame")
        need(self.concepts_per_clip[1] <= self.num_concepts, "concepts_per_clip", "exceeds num_concepts")
        need(1 <= self.num_function_words <= len(FUNCTION_WORDS), "num_function_words",
             f"must lie in [1, {len(FUNCTION_WORDS)}]")
        need(self.num_concepts >= 2, "num_concepts", "must be at least 2")
        vocab_needed = len(SPECIAL_TOKENS) + self.num_concepts + self.num_function_words + len(CAPTION_WORDS)
        need(vocab_needed <= self.vocab_capacity, "num_concepts", f"vocabulary of {vocab_needed} exceeds capacity {self.vocab_capacity}")
        need(self.feature_dim >= 1, "feature_dim", "must be positive")
        need(self.noise_sigma >= 0, "noise_sigma", "must be non-negative")
        need(0.0 <= self.temporal_offset_prob <= 1.0, "temporal_offset_prob", "must lie in [0, 1]")
        need(self.caption_len_max() <= self.max_text_len - 2, "concepts_per_clip", "caption would exceed max_text_len")

    def caption_len_max(self) -> int:
        return self.concepts_per_clip[1] * 2 + 1

    def concept_words(self) -> List[str]:
        words = list(CONCEPT_WORDS[: self.num_concepts])
        words += [f"step{i}" for i in range(len(words), self.num_concepts)]
        return words


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise FormatError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, words) -> "Vocabulary":
        return cls(list(SPECIAL_TOKENS) + sorted(set(words) - set(SPECIAL_TOKENS)))

    def tokenize(self, text: str) -> List[int]:
        out = []
        for word in text.split():
            if word not in self.ids:
                raise UnknownTokenError(f"unknown token {word!r}")
            out.append(self.ids[word])
        return out

    def detokenize(self, ids: Sequence[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIAL_TOKENS):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def frame(self, text: str, max_len: int) -> List[int]:
        """``[CLS] tokens [SEP]`` truncated to ``max_len``."""
        ids = self.tokenize(text)[: max_len - 2]
        return [CLS] + ids + [SEP]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------------------
# records


@dataclass
class ClipRecord:
    video_id: str
    clip_index: int
    split: str
    text: str
    caption: str
    concepts: List[int]
    frame_labels: List[int]
    sentiment: float
    offset: int
    frames: np.ndarray = field(repr=False, default=None)

    def annotation(self) -> Dict:
        return {k: getattr(self, k) for k in ANNOTATION_FIELDS}


@dataclass
class ClipTextPair:
    video_id: str
    clip_index: int
    tokens: List[int]
    frames: np.ndarray

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != CLS or self.tokens.count(SEP) != 1 or self.tokens[-1] != SEP:
            raise FormatError(f"{self.video_id}/{self.clip_index}: tokens must be [CLS] ... [SEP]")
        if np.isnan(self.frames).any():
            raise FormatError(f"{self.video_id}/{self.clip_index}: NaN in frame features")


@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocabulary
    records: List[ClipRecord]
    anchors: Optional[np.ndarray] = None

    def split(self, name: str) -> List[ClipRecord]:
        return [r for r in self.records if r.split == name]

    def pairs(self, split: str = "train", field_name: str = "text") -> List[ClipTextPair]:
        out = []
        for r in self.split(split):
            toks = self.vocab.frame(getattr(r, field_name), self.spec.max_text_len)
            out.append(ClipTextPair(r.video_id, r.clip_index, toks, r.frames))
        return out

    def videos(self, split: str = "train") -> Dict[str, List[ClipRecord]]:
        out: Dict[str, List[ClipRecord]] = {}
        for r in self.split(split):
            out.setdefault(r.video_id, []).append(r)
        for clips in out.values():
            clips.sort(key=lambda r: r.clip_index)
        return out


# ---------------------------------------------------------------------------
# generation


def _caption(words: Sequence[str]) -> str:
    out = ["first", words[0]]
    for w in words[1:]:
        out += ["then", w]
    out.append("done")
    return " ".join(out)


def _transcript(words: Sequence[str], length: int, fillers: Sequence[str], rng) -> str:
    slots = sorted(rng.choice(length, size=len(words), replace=False).tolist())
    out = [fillers[int(i)] for i in rng.integers(len(fillers), size=length)]
    for pos, w in zip(slots, words):
        out[pos] = w
    return " ".join(out)


def _segment_lengths(m: int, k: int, rng) -> List[int]:
    cuts = sorted(rng.choice(np.arange(1, m), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0] + cuts + [m]
    return [b - a for a, b in zip(bounds[:-1], bounds[1:])]


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic corpus from ``spec`` (train videos first, then validation videos)."""
    words = spec.concept_words()
    fillers = FUNCTION_WORDS[: spec.num_function_words]
    anchors = make_rng(spec.seed, "anchors").normal(0.0, 1.0, size=(spec.num_concepts, spec.feature_dim))
    weights = make_rng(spec.seed, "sentiment").uniform(-1.5, 1.5, size=spec.num_concepts)
    used = set()
    records: List[ClipRecord] = []
    total_videos = spec.num_videos + spec.val_videos
    for v in range(total_videos):
        rng = make_rng(spec.seed, "video", v)
        split = "train" if v < spec.num_videos else "val"
        video_id = f"vid{v:04d}"
        clips = []
        for c in range(spec.clips_per_video):
            for _attempt in range(1000):
                k = int(rng.integers(spec.concepts_per_clip[0], spec.concepts_per_clip[1] + 1))
                concepts = rng.choice(spec.num_concepts, size=k, replace=False).tolist()
                if frozenset(concepts) not in used:
                    break
            used.add(frozenset(concepts))
            m = int(rng.integers(spec.frames_per_clip[0], spec.frames_per_clip[1] + 1))
            labels: List[int] = []
            for concept, n in zip(concepts, _segment_lengths(m, k, rng)):
                labels += [concept] * n
            frames = anchors[labels] + rng.normal(0.0, 1.0, size=(m, spec.feature_dim)) * spec.noise_sigma
            length = int(rng.integers(max(spec.tokens_per_clip[0], k), spec.tokens_per_clip[1] + 1))
            cw = [words[i] for i in concepts]
            text = _transcript(cw, length, fillers, rng)
            score = float(np.clip(weights[concepts].sum() + rng.normal() * spec.sentiment_noise, -3.0, 3.0))
            clips.append(ClipRecord(video_id, c, split, text, _caption(cw), concepts, labels, score, 0, frames))
        own_text = [r.text for r in clips]
        for c, rec in enumerate(clips):
            if spec.clips_per_video < 2 or rng.random() >= spec.temporal_offset_prob:
                continue
            if c == 0:
                step = 1
            elif c == spec.clips_per_video - 1:
                step = -1
            else:
                step = 1 if rng.random() < 0.5 else -1
            rec.text = own_text[c + step]
            rec.offset = step
        records.extend(clips)
    vocab = Vocabulary.build(list(words) + list(fillers) + list(CAPTION_WORDS))
    return Corpus(spec, vocab, records, anchors)


# ---------------------------------------------------------------------------
# feature files


def encode_features(clips: Sequence[Tuple[int, np.ndarray]]) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<HI", FEATURE_VERSION, len(clips))]
    for clip_index, frames in clips:
        frames = np.ascontiguousarray(frames, dtype="<f8")
        if frames.ndim != 2:
            raise FormatError(f"clip {clip_index}: frames must be 2-D, got {frames.shape}")
        parts.append(struct.pack("<III", clip_index, frames.shape[0], frames.shape[1]))
        parts.append(frames.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_features(raw: bytes, source: str = "<bytes>") -> List[Tuple[int, np.ndarray]]:
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{source}: bad magic, not a UVLF feature file")
    if len(raw) < 14:
        raise FormatError(f"{source}: truncated header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{source}: unsupported feature format version {version}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    (count,) = struct.unpack_from("<I", raw, 6)
    offset, end = 10, len(raw) - 4
    out = []
    for _ in range(count):
        if offset + 12 > end:
            raise FormatError(f"{source}: truncated clip header")
        clip_index, m, d = struct.unpack_from("<III", raw, offset)
        offset += 12
        nbytes = 8 * m * d
        if offset + nbytes > end:
            raise FormatError(f"{source}: truncated frame payload for clip {clip_index}")
        frames = np.frombuffer(raw, dtype="<f8", count=m * d, offset=offset).astype(np.float64).reshape(m, d)
        offset += nbytes
        out.append((clip_index, frames))
    if offset != end:
        raise FormatError(f"{source}: {end - offset} unexpected trailing bytes")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{source}: CRC32 checksum mismatch")
    return out


def write_features(path, clips: Sequence[Tuple[int, np.ndarray]]) -> None:
    Path(path).write_bytes(encode_features(clips))


def read_features(path) -> List[Tuple[int, np.ndarray]]:
    return decode_features(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# corpus directories


def _annotation_line(rec: ClipRecord) -> str:
    return json.dumps(rec.annotation(), ensure_ascii=False, separators=(", ", ": "))


def write_corpus(corpus: Corpus, out_dir) -> List[Path]:
    """Write every corpus file; returns the written paths in a stable order."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    written = []
    spec_path = out / "spec.txt"
    spec_path.write_text(dump(corpus.spec), encoding="utf-8")
    written.append(spec_path)
    vocab_path = out / "vocab.txt"
    corpus.vocab.write(vocab_path)
    written.append(vocab_path)
    ann_path = out / "annotations.jsonl"
    ann_path.write_text("".join(_annotation_line(r) + "\n" for r in corpus.records), encoding="utf-8")
    written.append(ann_path)
    by_video: Dict[str, List[ClipRecord]] = {}
    for r in corpus.records:
        by_video.setdefault(r.video_id, []).append(r)
    for vid in sorted(by_video):
        path = out / "features" / f"{vid}.uvlf"
        write_features(path, [(r.clip_index, r.frames) for r in by_video[vid]])
        written.append(path)
    return written


def read_annotations(path) -> List[Dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if tuple(row) != ANNOTATION_FIELDS:
            raise FormatError(f"{path}:{lineno}: fields {tuple(row)} differ from {ANNOTATION_FIELDS}")
        rows.append(row)
    return rows


def read_corpus(in_dir) -> Corpus:
    from .config import build, read_file

    root = Path(in_dir)
    spec = build(CorpusSpec, read_file(root / "spec.txt"), str(root / "spec.txt"))
    vocab = Vocabulary.read(root / "vocab.txt")
    rows = read_annotations(root / "annotations.jsonl")
    features: Dict[str, Dict[int, np.ndarray]] = {}
    records = []
    for row in rows:
        vid = row["video_id"]
        if vid not in features:
            features[vid] = dict(read_features(root / "features" / f"{vid}.uvlf"))
        if row["clip_index"] not in features[vid]:
            raise FormatError(f"{vid}: no features for clip {row['clip_index']}")
        frames = features[vid][row["clip_index"]]
        if len(row["frame_labels"]) != frames.shape[0]:
            raise FormatError(f"{vid}/{row['clip_index']}: {len(row['frame_labels'])} labels for {frames.shape[0]} frames")
        records.append(ClipRecord(**row, frames=frames))
    return Corpus(spec, vocab, records)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray
    text_keep: np.ndarray
    frames: np.ndarray
    video_keep: np.ndarray
    video_ids: List[str]
    clip_indices: List[int]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def pad_tokens(rows: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    n = max(len(r) for r in rows)
    toks = np.full((len(rows), n), PAD, dtype=np.int64)
    keep = np.zeros((len(rows), n), dtype=bool)
    for i, r in enumerate(rows):
        toks[i, : len(r)] = r
        keep[i, : len(r)] = True
    return toks, keep


def pad_frames(clips: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    m = max(c.shape[0] for c in clips)
    d = clips[0].shape[1]
    frames = np.zeros((len(clips), m, d))
    keep = np.zeros((len(clips), m), dtype=bool)
    for i, c in enumerate(clips):
        frames[i, : c.shape[0]] = c
        keep[i, : c.shape[0]] = True
    return frames, keep


def collate(pairs: Sequence[ClipTextPair]) -> Batch:
    toks, tkeep = pad_tokens([p.tokens for p in pairs])
    frames, vkeep = pad_frames([p.frames for p in pairs])
    return Batch(toks, tkeep, frames, vkeep, [p.video_id for p in pairs], [p.clip_index for p in pairs])
