"""Corruption procedures for pre-training: token masking, frame masking, whole-text masking.

All functions take an explicit ``numpy.random.Generator`` so identical seeds
give identical masks. Masked tokens are always replaced by ``[MASK]``; the
literal recipe has no 80/10/10 split unless ``bert_split`` is requested.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .model import CLS, MASK, PAD, SEP

IGNORE = -100


class MaskingError(ValueError):
    pass


@dataclass
class MaskedBatchView:
    corrupted_tokens: np.ndarray
    corrupted_frames: np.ndarray
    mlm_targets: np.ndarray
    masked_frames: np.ndarray
    enhancedv_flags: np.ndarray


def _force_one(selected: np.ndarray, candidates: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if not selected.any():
        selected[candidates[rng.integers(candidates.size)]] = True
    return selected


def mask_tokens(
    tokens: Sequence[int],
    rng: np.random.Generator,
    rate: float = 0.15,
    unmaskable: Tuple[int, ...] = (PAD, CLS, SEP),
    mask_id: int = MASK,
    bert_split: bool = False,
    vocab_size: Optional[int] = None,
    first_regular_id: int = 6,
):
    """Returns ``(corrupted, targets, positions)`` for one token sequence.

    Every maskable position is selected independently with probability
    ``rate``; if none is selected, one maskable position is forced.
    """
    if not 0.0 <= rate < 1.0:
        raise MaskingError(f"mask rate {rate} outside [0, 1)")
    tokens = np.asarray(tokens, dtype=np.int64)
    candidates = np.nonzero(~np.isin(tokens, unmaskable))[0]
    if candidates.size == 0:
        raise MaskingError("sequence has no maskable positions")
    selected = np.zeros(tokens.shape, dtype=bool)
    selected[candidates] = rng.random(candidates.size) < rate
    selected = _force_one(selected, candidates, rng)
    positions = np.nonzero(selected)[0]
    corrupted = tokens.copy()
    targets = np.full(tokens.shape, IGNORE, dtype=np.int64)
    targets[positions] = tokens[positions]
    if bert_split:
        if vocab_size is None:
            raise MaskingError("bert_split needs vocab_size")
        roll = rng.random(positions.size)
        corrupted[positions[roll < 0.8]] = mask_id
        rand_pos = positions[(roll >= 0.8) & (roll < 0.9)]
        corrupted[rand_pos] = rng.integers(first_regular_id, vocab_size, size=rand_pos.size)
    else:
        corrupted[positions] = mask_id
    return corrupted, targets, positions


def mask_frames(frames: np.ndarray, rng: np.random.Generator, rate: float = 0.15, keep: Optional[np.ndarray] = None):
    """Zero a random subset (at least one) of the real frames; returns ``(corrupted, masked_indices)``."""
    if not 0.0 <= rate < 1.0:
        raise MaskingError(f"mask rate {rate} outside [0, 1)")
    frames = np.asarray(frames, dtype=np.float64)
    keep = np.ones(frames.shape[0], dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    candidates = np.nonzero(keep)[0]
    if candidates.size == 0:
        raise MaskingError("clip has no real frames")
    selected = np.zeros(frames.shape[0], dtype=bool)
    selected[candidates] = rng.random(candidates.size) < rate
    selected = _force_one(selected, candidates, rng)
    corrupted = frames.copy()
    corrupted[selected] = 0.0
    return corrupted, np.nonzero(selected)[0]


def enhancedv_flags(batch_size: int, rng: np.random.Generator, prob: float = 0.15) -> np.ndarray:
    if prob <= 0.0:
        return np.zeros(batch_size, dtype=bool)
    return rng.random(batch_size) < prob


def corrupt_batch(
    tokens: np.ndarray,
    text_keep: np.ndarray,
    frames: np.ndarray,
    video_keep: np.ndarray,
    rng: np.random.Generator,
    token_rate: float = 0.15,
    frame_rate: float = 0.15,
    enhancedv_prob: float = 0.15,
    bert_split: bool = False,
    vocab_size: Optional[int] = None,
) -> MaskedBatchView:
    """Apply whole-text masking, then token masking to unflagged pairs, then frame masking.

    Flagged pairs have every real token (framing included) replaced by
    ``[MASK]`` and contribute no masked-LM targets.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    B = tokens.shape[0]
    flags = enhancedv_flags(B, rng, enhancedv_prob)
    ctoks = tokens.copy()
    targets = np.full(tokens.shape, IGNORE, dtype=np.int64)
    for b in range(B):
        if flags[b]:
            ctoks[b, text_keep[b]] = MASK
            continue
        c, t, _ = mask_tokens(tokens[b], rng, token_rate, bert_split=bert_split, vocab_size=vocab_size)
        ctoks[b], targets[b] = c, t
    cframes = np.array(frames, dtype=np.float64, copy=True)
    masked = np.zeros(video_keep.shape, dtype=bool)
    for b in range(B):
        cframes[b], idx = mask_frames(frames[b], rng, frame_rate, video_keep[b])
        masked[b, idx] = True
    return MaskedBatchView(ctoks, cframes, targets, masked, flags)


def apply_enhancedv(tokens: np.ndarray, text_keep: np.ndarray, rng: np.random.Generator, prob: float = 0.15):
    """Flag each pair with probability ``prob`` and fully mask its real tokens.

    Returns ``(corrupted_tokens, mlm_targets, flags)``; targets for flagged
    pairs are all ignored.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    flags = enhancedv_flags(tokens.shape[0], rng, prob)
    out = tokens.copy()
    out[flags[:, None] & np.asarray(text_keep, dtype=bool)] = MASK
    targets = np.full(tokens.shape, IGNORE, dtype=np.int64)
    return out, targets, flags
