"""Transformer building blocks: attention, feed-forward, encoder and decoder stacks.

Stacks are position-free (position embeddings are added by the caller) and use
post-layer-norm ordering. All functions accept ``x[..., L, d]``; masks are
boolean arrays broadcastable to ``[..., L_q, L_k]`` where True means "may
attend".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as F
from .tensor import Tensor

Params = Dict[str, Tensor]


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    num_layers: int = 1
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.hidden_size <= 0 or self.num_heads <= 0 or self.ffn_size <= 0 or self.num_layers < 0:
            raise ValueError(f"invalid block sizes: {self}")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")


@dataclass
class Runtime:
    """Per-forward switches: training mode and the dropout rng stream."""

    train: bool = False
    rng: Optional[np.random.Generator] = None
    dropout_rate: float = 0.0

    def drop(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.dropout_rate, self.train, self.rng)


EVAL = Runtime()


# ---------------------------------------------------------------------------
# masks


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(keep: np.ndarray, query_len: Optional[int] = None) -> np.ndarray:
    """Allowed matrix ``[..., L_q, L_k]`` forbidding attention to keys where ``keep`` is False."""
    keep = np.asarray(keep, dtype=bool)
    lq = keep.shape[-1] if query_len is None else query_len
    return np.broadcast_to(keep[..., None, :], keep.shape[:-1] + (lq, keep.shape[-1]))


def is_causal(allowed: np.ndarray) -> bool:
    allowed = np.asarray(allowed, dtype=bool)
    lq, lk = allowed.shape[-2:]
    upper = np.triu(np.ones((lq, lk), dtype=bool), k=1)
    return not np.any(allowed & upper)


# ---------------------------------------------------------------------------
# parameter initialisation


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_linear(rng, d_in: int, d_out: int, prefix: str) -> Params:
    return {prefix + "w": _normal(rng, (d_in, d_out)), prefix + "b": _zeros((d_out,))}


def init_layer_norm(d: int, prefix: str) -> Params:
    return {prefix + "gamma": _ones((d,)), prefix + "beta": _zeros((d,))}


def init_attention(rng, d: int, prefix: str) -> Params:
    p: Params = {}
    for name in ("q", "k", "v", "o"):
        p.update(init_linear(rng, d, d, f"{prefix}{name}."))
    return p


def init_ffn(rng, d: int, ffn: int, prefix: str) -> Params:
    p = init_linear(rng, d, ffn, prefix + "in.")
    p.update(init_linear(rng, ffn, d, prefix + "out."))
    return p


def init_encoder(rng, cfg: BlockConfig, prefix: str) -> Params:
    p: Params = {}
    d = cfg.hidden_size
    for i in range(cfg.num_layers):
        lp = f"{prefix}layer{i}."
        p.update(init_attention(rng, d, lp + "attn."))
        p.update(init_layer_norm(d, lp + "ln1."))
        p.update(init_ffn(rng, d, cfg.ffn_size, lp + "ffn."))
        p.update(init_layer_norm(d, lp + "ln2."))
    return p


def init_decoder(rng, cfg: BlockConfig, prefix: str) -> Params:
    p: Params = {}
    d = cfg.hidden_size
    for i in range(cfg.num_layers):
        lp = f"{prefix}layer{i}."
        p.update(init_attention(rng, d, lp + "self."))
        p.update(init_layer_norm(d, lp + "ln1."))
        p.update(init_attention(rng, d, lp + "cross."))
        p.update(init_layer_norm(d, lp + "ln2."))
        p.update(init_ffn(rng, d, cfg.ffn_size, lp + "ffn."))
        p.update(init_layer_norm(d, lp + "ln3."))
    return p


def scoped(params: Params, prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# forward passes


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, length, d = x.shape
    y = F.reshape(x, (*lead, length, h, d // h))
    nd = y.ndim
    return F.transpose(y, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    y = F.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, length, h, dh = y.shape
    return F.reshape(y, (*lead, length, h * dh))


def check_mask(allowed: np.ndarray, lq: int, lk: int) -> np.ndarray:
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape[-2:] != (lq, lk):
        raise MaskError(f"mask trailing shape {allowed.shape[-2:]} does not match ({lq}, {lk})")
    if not np.all(allowed.any(axis=-1)):
        raise MaskError("a query row has no allowed keys")
    return allowed


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    allowed: np.ndarray,
    p: Params,
    num_heads: int,
    rt: Runtime = EVAL,
) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` heads with an output projection."""
    d = q.shape[-1]
    if d % num_heads:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    allowed = check_mask(allowed, q.shape[-2], k.shape[-2])
    qh = _split_heads(F.linear(q, p["q.w"], p["q.b"]), num_heads)
    kh = _split_heads(F.linear(k, p["k.w"], p["k.b"]), num_heads)
    vh = _split_heads(F.linear(v, p["v.w"], p["v.b"]), num_heads)
    scores = F.scale(F.matmul(qh, F.transpose(kh)), 1.0 / np.sqrt(d // num_heads))
    head_mask = np.expand_dims(allowed, -3)
    weights = rt.drop(F.softmax(scores, axis=-1, mask=head_mask))
    return F.linear(_merge_heads(F.matmul(weights, vh)), p["o.w"], p["o.b"])


def feed_forward(x: Tensor, p: Params, rt: Runtime = EVAL) -> Tensor:
    hidden = F.gelu(F.linear(x, p["in.w"], p["in.b"]))
    return F.linear(rt.drop(hidden), p["out.w"], p["out.b"])


def _residual_norm(x: Tensor, sub: Tensor, p: Params, prefix: str, rt: Runtime) -> Tensor:
    return F.layer_norm(F.add(x, rt.drop(sub)), p[prefix + "gamma"], p[prefix + "beta"])


def encoder_stack(x: Tensor, allowed: np.ndarray, cfg: BlockConfig, p: Params, rt: Runtime = EVAL) -> Tensor:
    for i in range(cfg.num_layers):
        lp = scoped(p, f"layer{i}.")
        x = _residual_norm(x, multi_head_attention(x, x, x, allowed, scoped(lp, "attn."), cfg.num_heads, rt), lp, "ln1.", rt)
        x = _residual_norm(x, feed_forward(x, scoped(lp, "ffn."), rt), lp, "ln2.", rt)
    return x


def decoder_stack(
    targets: Tensor,
    memory: Tensor,
    self_allowed: np.ndarray,
    memory_allowed: np.ndarray,
    cfg: BlockConfig,
    p: Params,
    rt: Runtime = EVAL,
) -> Tensor:
    """Causal self-attention, cross-attention over ``memory``, then FFN, per layer."""
    if not is_causal(self_allowed):
        raise MaskError("decoder self-attention mask permits attending to future positions")
    x = targets
    for i in range(cfg.num_layers):
        lp = scoped(p, f"layer{i}.")
        x = _residual_norm(x, multi_head_attention(x, x, x, self_allowed, scoped(lp, "self."), cfg.num_heads, rt), lp, "ln1.", rt)
        x = _residual_norm(
            x, multi_head_attention(x, memory, memory, memory_allowed, scoped(lp, "cross."), cfg.num_heads, rt), lp, "ln2.", rt
        )
        x = _residual_norm(x, feed_forward(x, scoped(lp, "ffn."), rt), lp, "ln3.", rt)
    return x
