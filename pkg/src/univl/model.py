"""The four-component video-language model: text encoder, video encoder, cross encoder, decoder.

Inputs are batched: token ids ``[B, n]`` with a boolean keep mask ``[B, n]``
(False at padding), frame features ``[B, m, d_f]`` with keep mask ``[B, m]``.
Single (unbatched) inputs are accepted by every ``encode_*`` function and
returned unbatched.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from . import blocks
from . import tensor as F
from .blocks import BlockConfig, Runtime, EVAL
from .tensor import GELU_VARIANT, Tensor

PAD, CLS, SEP, MASK, BOS, EOS = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]")

CHECKPOINT_MAGIC = b"UVLC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden: int = 64
    video_feature_dim: int = 32
    max_text_len: int = 32
    max_video_len: int = 48
    text_layers: int = 2
    video_layers: int = 2
    cross_layers: int = 1
    decoder_layers: int = 1
    heads: int = 4
    ffn_size: int = 256
    dropout: float = 0.1
    max_gen_len: int = 32
    num_frame_labels: int = 16
    segment_embedding: bool = True
    pad_id: int = PAD
    cls_id: int = CLS
    sep_id: int = SEP
    mask_id: int = MASK
    bos_id: int = BOS
    eos_id: int = EOS

    def __post_init__(self):
        specials = self.special_ids()
        if len(set(specials)) != len(specials):
            raise ValueError(f"special token ids are not distinct: {specials}")
        if max(specials) >= self.vocab_size or min(specials) < 0:
            raise ValueError(f"special token ids {specials} must lie in [0, {self.vocab_size})")
        if self.max_text_len < 1 or self.max_video_len < 1 or self.max_gen_len < 1:
            raise ValueError("sequence caps must be at least 1")
        for name in ("text_layers", "video_layers", "cross_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        # validates head divisibility and dropout range
        self.block(0)

    def special_ids(self) -> Tuple[int, ...]:
        return (self.pad_id, self.cls_id, self.sep_id, self.mask_id, self.bos_id, self.eos_id)

    def block(self, layers: int) -> BlockConfig:
        return BlockConfig(self.hidden, self.heads, self.ffn_size, layers, self.dropout)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class EncodingBundle:
    T: Tensor
    V: Tensor
    M: Tensor
    text_keep: np.ndarray
    video_keep: np.ndarray
    D: Optional[Tensor] = None

    @property
    def n(self) -> int:
        return self.T.shape[-2]

    @property
    def m(self) -> int:
        return self.V.shape[-2]

    def text_rows(self) -> Tensor:
        return self.M[..., : self.n, :]

    def video_rows(self) -> Tensor:
        return self.M[..., self.n :, :]

    def memory_keep(self) -> np.ndarray:
        return np.concatenate([self.text_keep, self.video_keep], axis=-1)


class ModelParameters:
    """Named, ordered collection of every trainable tensor plus the config that shaped it."""

    GROUPS = ("text.", "video.", "cross.", "decoder.", "heads.")

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]", seed: int = 0):
        self.config = config
        self.tensors = tensors
        self.seed = seed
        for name, t in tensors.items():
            t.name = name
            t.requires_grad = True

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParameters":
        rng = np.random.Generator(np.random.PCG64(seed))
        c = config
        d = c.hidden
        p: Dict[str, Tensor] = OrderedDict()
        normal = blocks._normal
        # text encoder
        p["text.tok_emb"] = normal(rng, (c.vocab_size, d))
        p["text.pos_emb"] = normal(rng, (c.max_text_len, d))
        p.update(blocks.init_layer_norm(d, "text.emb_ln."))
        p.update(blocks.init_encoder(rng, c.block(c.text_layers), "text.enc."))
        # video encoder
        p.update(blocks.init_linear(rng, c.video_feature_dim, d, "video.proj."))
        p["video.pos_emb"] = normal(rng, (c.max_video_len, d))
        p.update(blocks.init_layer_norm(d, "video.emb_ln."))
        p.update(blocks.init_encoder(rng, c.block(c.video_layers), "video.enc."))
        # cross encoder
        if c.segment_embedding:
            p["cross.seg_emb"] = normal(rng, (2, d))
        p.update(blocks.init_encoder(rng, c.block(c.cross_layers), "cross.enc."))
        # decoder
        p["decoder.tok_emb"] = normal(rng, (c.vocab_size, d))
        p["decoder.pos_emb"] = normal(rng, (c.max_gen_len, d))
        p.update(blocks.init_layer_norm(d, "decoder.emb_ln."))
        p.update(blocks.init_decoder(rng, c.block(c.decoder_layers), "decoder.dec."))
        # heads
        p.update(blocks.init_linear(rng, d, d, "heads.align.hidden."))
        p.update(blocks.init_linear(rng, d, 1, "heads.align.score."))
        p.update(blocks.init_linear(rng, d, c.vocab_size, "heads.mlm."))
        p.update(blocks.init_linear(rng, c.video_feature_dim, d, "heads.cmfm."))
        p.update(blocks.init_linear(rng, d, c.vocab_size, "heads.lm."))
        p.update(blocks.init_linear(rng, d, c.num_frame_labels, "heads.frame."))
        p.update(blocks.init_linear(rng, d, 1, "heads.sentiment."))
        return cls(config, OrderedDict(p), seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def subset(self, prefixes: Iterable[str]) -> "OrderedDict[str, Tensor]":
        prefixes = tuple(prefixes)
        return OrderedDict((k, v) for k, v in self.tensors.items() if k.startswith(prefixes))

    def scope(self, prefix: str) -> Dict[str, Tensor]:
        return blocks.scoped(self.tensors, prefix)

    def digest(self, prefixes: Iterable[str] = ("",)) -> str:
        h = hashlib.sha256()
        for name, t in self.subset(prefixes).items():
            h.update(name.encode())
            h.update(np.asarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.config,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.tensors.items()),
            self.seed,
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


# ---------------------------------------------------------------------------
# encoders


def _promote(values, keep, feature_axis: bool):
    """Add a batch axis to a single example; default keep mask is all True."""
    arr = np.asarray(values)
    seq_ndim = arr.ndim - (1 if feature_axis else 0)
    single = seq_ndim == 1
    if single:
        arr = arr[None]
    mask_shape = arr.shape[:-1] if feature_axis else arr.shape
    keep = np.ones(mask_shape, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    if single and keep.ndim == 1:
        keep = keep[None]
    return arr, keep, single


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return x[0] if single else x


def _runtime(cfg: ModelConfig, rt: Optional[Runtime]) -> Runtime:
    if rt is None:
        return EVAL
    return Runtime(rt.train, rt.rng, cfg.dropout if rt.train else 0.0)


def encode_text(tokens, keep, params: ModelParameters, rt: Optional[Runtime] = None) -> Tensor:
    """Token + position embedding followed by the text encoder stack."""
    c = params.config
    ids, keep, single = _promote(tokens, keep, False)
    n = ids.shape[-1]
    if n > c.max_text_len:
        raise ValueError(f"text length {n} exceeds max_text_len {c.max_text_len}")
    if keep.shape != ids.shape:
        raise ValueError(f"text keep mask {keep.shape} does not match tokens {ids.shape}")
    rt = _runtime(c, rt)
    x = F.add(F.embedding_lookup(params["text.tok_emb"], ids), params["text.pos_emb"][:n])
    x = rt.drop(F.layer_norm(x, params["text.emb_ln.gamma"], params["text.emb_ln.beta"]))
    x = blocks.encoder_stack(x, blocks.padding_mask(keep), c.block(c.text_layers), params.scope("text.enc."), rt)
    return _unbatch(x, single)


def encode_video(frames, keep, params: ModelParameters, rt: Optional[Runtime] = None) -> Tensor:
    """Linear projection of frame features + position embedding, then the video encoder stack."""
    c = params.config
    fv, keep, single = _promote(frames, keep, True)
    if fv.ndim != 3 or fv.shape[-1] != c.video_feature_dim:
        raise ValueError(f"frame features {np.shape(frames)} do not have feature dim {c.video_feature_dim}")
    m = fv.shape[-2]
    if m > c.max_video_len:
        raise ValueError(f"video length {m} exceeds max_video_len {c.max_video_len}")
    if keep.shape != fv.shape[:-1]:
        raise ValueError(f"video keep mask {keep.shape} does not match frames {fv.shape[:-1]}")
    rt = _runtime(c, rt)
    x = F.linear(Tensor(fv), params["video.proj.w"], params["video.proj.b"])
    x = F.add(x, params["video.pos_emb"][:m])
    x = rt.drop(F.layer_norm(x, params["video.emb_ln.gamma"], params["video.emb_ln.beta"]))
    x = blocks.encoder_stack(x, blocks.padding_mask(keep), c.block(c.video_layers), params.scope("video.enc."), rt)
    return _unbatch(x, single)


def encode_cross(T: Tensor, V: Tensor, text_keep, video_keep, params: ModelParameters, rt: Optional[Runtime] = None) -> Tensor:
    """Concatenate ``[T; V]`` along the sequence axis and run the cross encoder; output has n+m rows."""
    c = params.config
    if T.shape[-1] != c.hidden or V.shape[-1] != c.hidden:
        raise ValueError(f"cross encoder expects width {c.hidden}, got {T.shape} and {V.shape}")
    text_keep = np.asarray(text_keep, dtype=bool)
    video_keep = np.asarray(video_keep, dtype=bool)
    n, m = T.shape[-2], V.shape[-2]
    x = F.concat([T, V], axis=-2)
    if c.segment_embedding:
        seg = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(m, dtype=np.int64)])
        x = F.add(x, F.embedding_lookup(params["cross.seg_emb"], seg))
    keep = np.concatenate([text_keep, video_keep], axis=-1)
    return blocks.encoder_stack(x, blocks.padding_mask(keep), c.block(c.cross_layers), params.scope("cross.enc."), _runtime(c, rt))


def encode_all(tokens, text_keep, frames, video_keep, params: ModelParameters, rt: Optional[Runtime] = None) -> EncodingBundle:
    if text_keep is None:
        text_keep = np.ones(np.shape(tokens), dtype=bool)
    if video_keep is None:
        video_keep = np.ones(np.shape(frames)[:-1], dtype=bool)
    T = encode_text(tokens, text_keep, params, rt)
    V = encode_video(frames, video_keep, params, rt)
    M = encode_cross(T, V, text_keep, video_keep, params, rt)
    return EncodingBundle(T, V, M, np.asarray(text_keep, dtype=bool), np.asarray(video_keep, dtype=bool))


def joint_embeddings(T: Tensor, V: Tensor, text_keep, video_keep) -> Tuple[Tensor, Tensor]:
    """Mean-pooled (t_hat, v_hat) over non-padded rows."""
    return F.mean_pool(T, text_keep), F.mean_pool(V, video_keep)


# ---------------------------------------------------------------------------
# decoder and heads


def decode_step_logits(prefix, M: Tensor, memory_keep, params: ModelParameters, prefix_keep=None, rt: Optional[Runtime] = None) -> Tensor:
    """Vocabulary logits ``[B, l, V]`` for every prefix position, attending to ``M``."""
    c = params.config
    ids = np.asarray(prefix, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    memory_keep = np.asarray(memory_keep, dtype=bool)
    if single and memory_keep.ndim == 1:
        memory_keep = memory_keep[None]
    if single and M.ndim == 2:
        M = F.reshape(M, (1,) + M.shape)
    l = ids.shape[-1]
    if l > c.max_gen_len:
        raise ValueError(f"prefix length {l} exceeds max_gen_len {c.max_gen_len}")
    if l == 0 or np.any(ids[:, 0] != c.bos_id):
        raise ValueError("decoder prefix must begin with BOS")
    keep = np.ones(ids.shape, dtype=bool) if prefix_keep is None else np.asarray(prefix_keep, dtype=bool)
    if single and keep.ndim == 1:
        keep = keep[None]
    rt = _runtime(c, rt)
    x = F.add(F.embedding_lookup(params["decoder.tok_emb"], ids), params["decoder.pos_emb"][:l])
    x = rt.drop(F.layer_norm(x, params["decoder.emb_ln.gamma"], params["decoder.emb_ln.beta"]))
    self_allowed = blocks.causal_mask(l)[None] & keep[:, None, :]
    mem_allowed = blocks.padding_mask(memory_keep, l)
    D = blocks.decoder_stack(x, M, self_allowed, mem_allowed, c.block(c.decoder_layers), params.scope("decoder.dec."), rt)
    logits = F.linear(D, params["heads.lm.w"], params["heads.lm.b"])
    return _unbatch(logits, single)


def mlm_logits(text_rows: Tensor, params: ModelParameters) -> Tensor:
    return F.linear(text_rows, params["heads.mlm.w"], params["heads.mlm.b"])


def cmfm_project(frames: Tensor, params: ModelParameters) -> Tensor:
    return F.linear(frames, params["heads.cmfm.w"], params["heads.cmfm.b"])


def align_score(cls_rows: Tensor, params: ModelParameters) -> Tensor:
    """s(.): linear, tanh, linear to a scalar per row; returns shape ``[...]``."""
    h = F.tanh(F.linear(cls_rows, params["heads.align.hidden.w"], params["heads.align.hidden.b"]))
    s = F.linear(h, params["heads.align.score.w"], params["heads.align.score.b"])
    return F.reshape(s, s.shape[:-1])


def frame_logits(V: Tensor, params: ModelParameters) -> Tensor:
    return F.linear(V, params["heads.frame.w"], params["heads.frame.b"])


def sentiment_score(cls_rows: Tensor, params: ModelParameters) -> Tensor:
    s = F.linear(cls_rows, params["heads.sentiment.w"], params["heads.sentiment.b"])
    return F.reshape(s, s.shape[:-1])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic "UVLC" | u16 version | u32 header length | header JSON (utf-8,
# sorted keys) | tensor payloads as little-endian float64 in header order |
# u32 CRC32 of all preceding bytes.  The header records the model config, the
# GELU variant, the init seed, tensor names/shapes, and free-form metadata.


def save_checkpoint(
    path,
    params: ModelParameters,
    meta: Optional[Mapping] = None,
    extra: Optional[Mapping[str, np.ndarray]] = None,
) -> None:
    entries = [(name, t.data) for name, t in params.items()]
    extra_entries = [(name, np.asarray(a, dtype=np.float64)) for name, a in (extra or {}).items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "gelu": GELU_VARIANT,
        "model_config": asdict(params.config),
        "seed": params.seed,
        "meta": dict(meta or {}),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "extra": [{"name": n, "shape": list(a.shape)} for n, a in extra_entries],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    for _, a in entries + extra_entries:
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(chunks)
    payload = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[ModelParameters, dict, Dict[str, np.ndarray]]:
    """Returns ``(params, meta, extra_arrays)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    if header.get("gelu") != GELU_VARIANT:
        raise CheckpointError(f"{path}: checkpoint built with GELU variant {header.get('gelu')!r}")
    offset = 10 + hlen
    end = len(raw) - 4

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > end:
            raise CheckpointError(f"{path}: truncated tensor payload")
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
        return a

    config = ModelConfig.from_dict(header["model_config"])
    tensors = OrderedDict()
    for entry in header["tensors"]:
        tensors[entry["name"]] = Tensor(take(tuple(entry["shape"])), requires_grad=True)
    extra = {e["name"]: take(tuple(e["shape"])) for e in header.get("extra", [])}
    if offset != end:
        raise CheckpointError(f"{path}: {end - offset} trailing bytes")
    params = ModelParameters(config, tensors, header.get("seed", 0))
    expected = ModelParameters.init(config, 0)
    if list(expected.tensors) != list(tensors) or any(expected[k].shape != tensors[k].shape for k in tensors):
        raise CheckpointError(f"{path}: tensor layout does not match its model config")
    return params, header.get("meta", {}), extra


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
