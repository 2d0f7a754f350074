"""The five pre-training losses and their weighted combination.

All contrastive losses reduce to one primitive, :func:`nce_loss`: for each row
of a logit matrix, ``logsumexp(candidates) - logsumexp(positives)``. No
temperature is applied anywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import model as mdl
from . import tensor as F
from .masking import IGNORE
from .model import ModelParameters
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_NAMES = ("joint", "cmlm", "cmfm", "align", "decoder")


class NumericFailure(FloatingPointError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


# ---------------------------------------------------------------------------
# NCE primitive


def nce_loss(logits: Tensor, positive: np.ndarray, candidates: Optional[np.ndarray] = None) -> Tensor:
    """Mean over rows of ``-log(sum_P exp / sum_C exp)``.

    ``positive`` is a boolean matrix like ``logits`` (or an integer index per
    row); ``candidates`` defaults to every column and always includes the
    positives.
    """
    positive = np.asarray(positive)
    if positive.dtype != bool:
        idx = positive.astype(np.int64)
        positive = np.zeros(logits.shape, dtype=bool)
        positive[np.arange(logits.shape[0]), idx] = True
    if candidates is None:
        candidates = np.ones(logits.shape, dtype=bool)
    candidates = np.asarray(candidates, dtype=bool) | positive
    per_row = F.sub(F.logsumexp(logits, axis=-1, mask=candidates), F.logsumexp(logits, axis=-1, mask=positive))
    return F.mean(per_row)


# ---------------------------------------------------------------------------
# video-text joint (MIL-NCE)


def positive_pairs(video_ids: Sequence[str], clip_indices: Sequence[int]) -> np.ndarray:
    """``P[i, j]`` is True when pair j is a positive for anchor i: itself or a temporal neighbour."""
    vid = np.asarray(video_ids)
    ci = np.asarray(clip_indices, dtype=np.int64)
    return (vid[:, None] == vid[None, :]) & (np.abs(ci[:, None] - ci[None, :]) <= 1)


def loss_joint(t_hats: Tensor, v_hats: Tensor, positives: np.ndarray) -> Tensor:
    """Symmetric MIL-NCE: fix each clip and contrast transcripts, then fix each transcript and contrast clips."""
    B = t_hats.shape[0]
    if B < 2:
        raise ValueError("joint loss needs a batch of at least 2 pairs")
    positives = np.asarray(positives, dtype=bool)
    if not np.all(np.diag(positives)):
        raise ValueError("every anchor must be in its own positive set")
    v_fixed = F.matmul(v_hats, F.transpose(t_hats))  # [i, j] = v_i . t_j
    t_fixed = F.matmul(t_hats, F.transpose(v_hats))  # [i, j] = t_i . v_j
    return F.scale(F.add(nce_loss(v_fixed, positives), nce_loss(t_fixed, positives)), 0.5)


# ---------------------------------------------------------------------------
# conditioned masked language model


def loss_cmlm(text_rows: Tensor, mlm_targets: np.ndarray, params: ModelParameters) -> Tensor:
    targets = np.asarray(mlm_targets, dtype=np.int64).reshape(-1)
    if not np.any(targets != IGNORE):
        log.info("cmlm: no masked tokens in batch (all pairs fully masked); contributing 0")
        return Tensor(np.array(0.0))
    logits = mdl.mlm_logits(text_rows, params)
    return F.cross_entropy(F.reshape(logits, (-1, logits.shape[-1])), targets, IGNORE)


# ---------------------------------------------------------------------------
# conditioned masked frame model


def cmfm_pool(video_keep: np.ndarray, masked: np.ndarray, rng: Optional[np.random.Generator] = None, cap: int = 512):
    """Candidate layout for frame NCE.

    Returns ``(real_flat, true_col, candidates)``: flat indices of every real
    frame in the batch, the column of each masked frame's own output, and a
    boolean ``[num_masked, num_real]`` candidate mask, uniformly subsampled to
    ``cap`` columns per row (own column always kept).
    """
    keep = np.asarray(video_keep, dtype=bool).reshape(-1)
    masked = np.asarray(masked, dtype=bool).reshape(-1)
    if np.any(masked & ~keep):
        raise ValueError("a masked frame is marked as padding")
    real_flat = np.nonzero(keep)[0]
    if real_flat.size < 2:
        raise ValueError("frame NCE needs at least one negative frame in the batch")
    col_of = np.full(keep.size, -1, dtype=np.int64)
    col_of[real_flat] = np.arange(real_flat.size)
    true_col = col_of[np.nonzero(masked)[0]]
    if true_col.size == 0:
        raise ValueError("frame NCE needs at least one masked frame")
    candidates = np.ones((true_col.size, real_flat.size), dtype=bool)
    if real_flat.size > cap:
        if rng is None:
            raise ValueError("pool subsampling needs an rng")
        candidates[:] = False
        for r, tc in enumerate(true_col):
            others = np.delete(np.arange(real_flat.size), tc)
            candidates[r, rng.choice(others, size=cap - 1, replace=False)] = True
            candidates[r, tc] = True
    return real_flat, true_col, candidates


def loss_cmfm(
    original_frames: np.ndarray,
    video_rows: Tensor,
    video_keep: np.ndarray,
    masked: np.ndarray,
    params: ModelParameters,
    rng: Optional[np.random.Generator] = None,
    cap: int = 512,
) -> Tensor:
    """Frame NCE: the projected original feature of masked frame m is scored against the
    cross-encoded video rows of every real frame in the batch; its own row is the positive."""
    d = video_rows.shape[-1]
    real_flat, true_col, candidates = cmfm_pool(video_keep, masked, rng, cap)
    orig = np.asarray(original_frames, dtype=np.float64).reshape(-1, np.shape(original_frames)[-1])
    masked_flat = np.nonzero(np.asarray(masked, dtype=bool).reshape(-1))[0]
    f = mdl.cmfm_project(Tensor(orig[masked_flat]), params)
    rows = F.reshape(video_rows, (-1, d))[real_flat]
    logits = F.matmul(f, F.transpose(rows))
    return nce_loss(logits, true_col, candidates)


# ---------------------------------------------------------------------------
# video-text alignment


def loss_align(scores: Tensor, candidates: Optional[np.ndarray] = None) -> Tensor:
    """NCE over alignment scores ``[B, 1 + K]``; column 0 is the matched pair."""
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("alignment loss needs at least one negative per positive")
    if candidates is not None and not np.all(np.asarray(candidates, dtype=bool)[:, 1:].any(axis=1)):
        raise ValueError("alignment loss needs at least one negative per positive")
    return nce_loss(scores, np.zeros(scores.shape[0], dtype=np.int64), candidates)


def pair_scores(T: Tensor, V: Tensor, text_keep, video_keep, text_idx, video_idx, params: ModelParameters, rt=None) -> Tensor:
    """s(CLS of cross-encode(T[text_idx[k]], V[video_idx[k]])) for every k; one cross pass per pair."""
    text_idx = np.asarray(text_idx, dtype=np.int64)
    video_idx = np.asarray(video_idx, dtype=np.int64)
    M = mdl.encode_cross(T[text_idx], V[video_idx], np.asarray(text_keep)[text_idx], np.asarray(video_keep)[video_idx], params, rt)
    return mdl.align_score(M[:, 0, :], params)


# ---------------------------------------------------------------------------
# language reconstruction


def decoder_io(tokens: np.ndarray, text_keep: np.ndarray, bos: int = mdl.BOS, eos: int = mdl.EOS, strip=(mdl.CLS, mdl.SEP)):
    """Teacher-forcing arrays from framed token rows: input ``BOS + words``, target ``words + EOS``.

    Returns ``(inputs, targets, keep)`` padded to the longest row; padded targets are IGNORE.
    """
    rows = []
    for toks, keep in zip(np.asarray(tokens), np.asarray(text_keep, dtype=bool)):
        words = [int(t) for t in toks[keep] if int(t) not in strip]
        rows.append(words)
    return decoder_io_from_lists(rows, bos, eos)


def decoder_io_from_lists(rows: Sequence[Sequence[int]], bos: int = mdl.BOS, eos: int = mdl.EOS):
    if not rows:
        raise ValueError("decoder target batch is empty")
    L = max(len(r) for r in rows) + 1
    inputs = np.full((len(rows), L), mdl.PAD, dtype=np.int64)
    targets = np.full((len(rows), L), IGNORE, dtype=np.int64)
    keep = np.zeros((len(rows), L), dtype=bool)
    for i, r in enumerate(rows):
        seq = list(r)
        inputs[i, : len(seq) + 1] = [bos] + seq
        targets[i, : len(seq) + 1] = seq + [eos]
        keep[i, : len(seq) + 1] = True
    return inputs, targets, keep


def loss_decoder(inputs: np.ndarray, targets: np.ndarray, keep: np.ndarray, M: Tensor, memory_keep, params: ModelParameters, rt=None) -> Tensor:
    if not np.any(np.asarray(targets) != IGNORE):
        raise ValueError("decoder target is empty")
    logits = mdl.decode_step_logits(inputs, M, memory_keep, params, keep, rt)
    return F.cross_entropy(F.reshape(logits, (-1, logits.shape[-1])), np.asarray(targets).reshape(-1), IGNORE)


# ---------------------------------------------------------------------------
# combination


@dataclass
class LossBundle:
    joint: Tensor
    cmlm: Tensor
    cmfm: Tensor
    align: Tensor
    decoder: Tensor
    weights: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(LOSS_NAMES, 1.0))
    total: Optional[Tensor] = None

    def values(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).data) for name in LOSS_NAMES}


def combine(losses: Dict[str, Tensor], weights: Optional[Dict[str, float]] = None) -> LossBundle:
    """Weighted sum of the five components; zero-weighted terms are logged but kept out of the graph."""
    w = dict.fromkeys(LOSS_NAMES, 1.0)
    if weights:
        unknown = set(weights) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        w.update({k: float(v) for k, v in weights.items()})
    for name in LOSS_NAMES:
        value = float(losses[name].data)
        if not math.isfinite(value):
            raise NumericFailure(name, value)
    total: Tensor = Tensor(np.array(0.0))
    for name in LOSS_NAMES:
        if w[name] != 0.0:
            total = F.add(total, F.scale(losses[name], w[name]))
    return LossBundle(**{n: losses[n] for n in LOSS_NAMES}, weights=w, total=total)
