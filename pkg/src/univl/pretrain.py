"""Two-stage pre-training (encoders-only joint stage, then all objectives) and the shared training loop.

Randomness is derived per ``(seed, stage, epoch, batch)`` so a run resumed
from a checkpoint reproduces the uninterrupted trajectory exactly; the ledger
records the stream key of every epoch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from time import perf_counter
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as mdl
from . import objectives as obj
from . import tensor as F
from .blocks import Runtime
from .config import FieldError
from .data import Batch, ClipTextPair, collate, pad_frames
from .masking import corrupt_batch
from .model import ModelParameters
from .optim import AdamState, adam_step, clip_grad_norm, zero_grad
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

ENCODER_PREFIXES = ("text.", "video.")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 200
    stage2_epochs: int = 200
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-4
    batch_size: int = 16
    warmup_fraction: float = 0.1
    seed: int = 0
    weight_joint: float = 1.0
    weight_cmlm: float = 1.0
    weight_cmfm: float = 1.0
    weight_align: float = 1.0
    weight_decoder: float = 1.0
    enhancedv_prob: float = 0.15
    token_mask_rate: float = 0.15
    frame_mask_rate: float = 0.15
    bert_split: bool = False
    grad_clip: float = 1.0
    cmfm_pool_cap: int = 512
    align_batch_negatives: int = -1
    align_same_video_negatives: int = 1
    stagedp: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.stage2_lr < self.stage1_lr:
            raise FieldError("stage2_lr", f"must be below stage1_lr ({self.stage2_lr} >= {self.stage1_lr})")
        if not 0.0 <= self.warmup_fraction <= 0.5:
            raise FieldError("warmup_fraction", "must lie in [0, 0.5]")
        if self.batch_size < 2:
            raise FieldError("batch_size", "must be at least 2 (contrastive losses need negatives)")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise FieldError("stage1_epochs", "epoch counts must be non-negative")
        if not 0.0 <= self.enhancedv_prob <= 1.0:
            raise FieldError("enhancedv_prob", "must lie in [0, 1]")

    def weights(self) -> Dict[str, float]:
        return {name: getattr(self, f"weight_{name}") for name in obj.LOSS_NAMES}


ABLATIONS: Dict[str, Dict] = {
    "joint": {"weight_joint": 0.0},
    "cmlm": {"weight_cmlm": 0.0},
    "cmfm": {"weight_cmfm": 0.0},
    "align": {"weight_align": 0.0},
    "decoder": {"weight_decoder": 0.0},
    "enhancedv": {"enhancedv_prob": 0.0},
    "stagedp": {"stagedp": False},
}


def ablate(cfg: TrainConfig, names: Sequence[str]) -> TrainConfig:
    """Copy of ``cfg`` with each named component switched off."""
    changes: Dict = {}
    for name in names:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
        changes.update(ABLATIONS[name])
    return replace(cfg, **changes)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up from 0 to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(math.floor(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


# ---------------------------------------------------------------------------
# batching


def epoch_batches(num_items: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is folded into its predecessor."""
    order = rng.permutation(num_items)
    batches = [order[i : i + batch_size] for i in range(0, num_items, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def batches_per_epoch(num_items: int, batch_size: int) -> int:
    return len(epoch_batches(num_items, batch_size, np.random.default_rng(0)))


# ---------------------------------------------------------------------------
# losses per stage


def stage1_losses(params: ModelParameters, batch: Batch, rng: np.random.Generator) -> Dict[str, Tensor]:
    rt = Runtime(train=True, rng=rng)
    T = mdl.encode_text(batch.tokens, batch.text_keep, params, rt)
    V = mdl.encode_video(batch.frames, batch.video_keep, params, rt)
    th, vh = mdl.joint_embeddings(T, V, batch.text_keep, batch.video_keep)
    return {"joint": obj.loss_joint(th, vh, obj.positive_pairs(batch.video_ids, batch.clip_indices))}


def _resample_same_video(batch: Batch, clips_by_video: Dict[str, Dict[int, np.ndarray]], rng, count: int):
    """For each pair pick ``count`` other clips of its own video (fewer if the video is short)."""
    extra_frames, owner = [], []
    for i, (vid, ci) in enumerate(zip(batch.video_ids, batch.clip_indices)):
        others = sorted(k for k in clips_by_video.get(vid, {}) if k != ci)
        if not others or count <= 0:
            continue
        picks = rng.choice(len(others), size=min(count, len(others)), replace=False)
        for p in sorted(picks.tolist()):
            extra_frames.append(clips_by_video[vid][others[p]])
            owner.append(i)
    return extra_frames, owner


def pretrain_losses(
    params: ModelParameters,
    batch: Batch,
    rng: np.random.Generator,
    cfg: TrainConfig,
    clips_by_video: Optional[Dict[str, Dict[int, np.ndarray]]] = None,
    train: bool = True,
) -> Dict[str, Tensor]:
    """All five objectives for one batch.

    The joint loss sees the uncorrupted single-modal encodings; every other
    objective runs on masked inputs. Alignment negatives are the other clips of
    the batch plus resampled clips of the same video, each scored with its own
    cross-encoder pass.
    """
    rt = Runtime(train=train, rng=rng if train else None)
    B = len(batch)
    T = mdl.encode_text(batch.tokens, batch.text_keep, params, rt)
    V = mdl.encode_video(batch.frames, batch.video_keep, params, rt)
    th, vh = mdl.joint_embeddings(T, V, batch.text_keep, batch.video_keep)
    losses = {"joint": obj.loss_joint(th, vh, obj.positive_pairs(batch.video_ids, batch.clip_indices))}

    view = corrupt_batch(
        batch.tokens, batch.text_keep, batch.frames, batch.video_keep, rng,
        cfg.token_mask_rate, cfg.frame_mask_rate, cfg.enhancedv_prob, cfg.bert_split, params.config.vocab_size,
    )
    extra, owner = _resample_same_video(batch, clips_by_video or {}, rng, cfg.align_same_video_negatives)
    clips = [view.corrupted_frames[b][batch.video_keep[b]] for b in range(B)] + extra
    frames_all, vkeep_all = pad_frames(clips)
    m_all = frames_all.shape[1]
    Tc = mdl.encode_text(view.corrupted_tokens, batch.text_keep, params, rt)
    Vc_all = mdl.encode_video(frames_all, vkeep_all, params, rt)
    Vc = Vc_all[:B]
    vkeep = vkeep_all[:B]
    M = mdl.encode_cross(Tc, Vc, batch.text_keep, vkeep, params, rt)
    n = Tc.shape[1]

    losses["cmlm"] = obj.loss_cmlm(M[:, :n, :], view.mlm_targets, params)

    orig = np.zeros((B, m_all, batch.frames.shape[2]))
    orig[:, : batch.frames.shape[1]] = batch.frames
    masked = np.zeros((B, m_all), dtype=bool)
    masked[:, : view.masked_frames.shape[1]] = view.masked_frames
    losses["cmfm"] = obj.loss_cmfm(orig, M[:, n:, :], vkeep, masked, params, rng, cfg.cmfm_pool_cap)

    losses["align"] = obj.loss_align(*_alignment_scores(Tc, Vc_all, batch.text_keep, vkeep_all, M, owner, B, cfg, params, rng, rt))

    inputs, targets, dkeep = obj.decoder_io(batch.tokens, batch.text_keep)
    losses["decoder"] = obj.loss_decoder(inputs, targets, dkeep, M, np.concatenate([batch.text_keep, vkeep], axis=1), params, rt)
    return losses


def _alignment_scores(Tc, Vc_all, text_keep, vkeep_all, M, owner, B, cfg, params, rng, rt):
    neg_text, neg_video, slots = [], [], []
    k_batch = B - 1 if cfg.align_batch_negatives < 0 else min(cfg.align_batch_negatives, B - 1)
    for i in range(B):
        others = [j for j in range(B) if j != i]
        if k_batch < len(others):
            others = sorted(rng.choice(others, size=k_batch, replace=False).tolist())
        row = [(i, j) for j in others] + [(i, B + e) for e, o in enumerate(owner) if o == i]
        slots.append(row)
    width = max(len(r) for r in slots)
    cand = np.zeros((B, 1 + width), dtype=bool)
    cand[:, 0] = True
    for i, row in enumerate(slots):
        cand[i, 1 : 1 + len(row)] = True
        row = row + [(i, i)] * (width - len(row))
        for t, v in row:
            neg_text.append(t)
            neg_video.append(v)
    pos = mdl.align_score(M[:, 0, :], params)
    neg = obj.pair_scores(Tc, Vc_all, text_keep, vkeep_all, neg_text, neg_video, params, rt)
    scores = F.concat([F.reshape(pos, (B, 1)), F.reshape(neg, (B, width))], axis=1)
    return scores, cand


# ---------------------------------------------------------------------------
# generic optimisation loop


@dataclass
class LoopState:
    epoch: int = 0
    adam: Optional[AdamState] = None


def optimize(
    params: ModelParameters,
    trainable_prefixes: Sequence[str],
    num_items: int,
    loss_fn: Callable[[np.ndarray, np.random.Generator], Dict[str, Tensor]],
    epochs: int,
    base_lr: float,
    warmup_fraction: float,
    batch_size: int,
    seed: int,
    label: str,
    weights: Optional[Dict[str, float]] = None,
    grad_clip: float = 1.0,
    state: Optional[LoopState] = None,
    on_epoch: Optional[Callable[[Dict, LoopState], None]] = None,
) -> LoopState:
    """Adam over the parameters under ``trainable_prefixes``; everything else is untouched.

    ``loss_fn(indices, rng)`` returns named loss tensors; their weighted sum
    (unit weights unless given) is minimised. ``on_epoch`` receives one record
    per epoch with the mean of every component.
    """
    trainable = params.subset(trainable_prefixes)
    state = state or LoopState()
    if state.adam is None:
        state.adam = AdamState.for_params(trainable, learning_rate=base_lr)
    bpe = batches_per_epoch(num_items, batch_size)
    total = max(epochs * bpe, 1)
    for epoch in range(state.epoch, epochs):
        sums: Dict[str, float] = {}
        lr = 0.0
        for b, idx in enumerate(epoch_batches(num_items, batch_size, make_rng(seed, label, "shuffle", epoch))):
            step = epoch * bpe + b
            lr = lr_at(step, total, base_lr, warmup_fraction)
            losses = loss_fn(idx, make_rng(seed, label, "batch", epoch, b))
            loss_total = _total(losses, weights)
            zero_grad(params.tensors)
            loss_total.backward()
            for name, p in trainable.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            clip_grad_norm(trainable, grad_clip)
            adam_step(trainable, state.adam, lr)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.data)
            sums["total"] = sums.get("total", 0.0) + float(loss_total.data)
        state.epoch = epoch + 1
        record = {"stage": label, "epoch": epoch, "step": (epoch + 1) * bpe, "lr": lr}
        record.update({k: v / bpe for k, v in sums.items()})
        record["rng_key"] = f"{seed}/{label}/batch/{epoch}"
        if on_epoch is not None:
            on_epoch(record, state)
    zero_grad(params.tensors)
    return state


def _total(losses: Dict[str, Tensor], weights: Optional[Dict[str, float]]) -> Tensor:
    if set(losses) <= set(obj.LOSS_NAMES):
        return obj.combine(_pad_names(losses), _weights_for(losses, weights)).total
    # fine-tuning objectives outside the pre-training set
    out = None
    for name, value in losses.items():
        if not math.isfinite(float(value.data)):
            raise obj.NumericFailure(name, float(value.data))
        w = 1.0 if weights is None else weights.get(name, 1.0)
        if w == 0.0:
            continue
        term = value if w == 1.0 else F.scale(value, w)
        out = term if out is None else F.add(out, term)
    return out if out is not None else Tensor(np.array(0.0))


def _pad_names(losses: Dict[str, Tensor]) -> Dict[str, Tensor]:
    out = {name: losses.get(name, Tensor(np.array(0.0))) for name in obj.LOSS_NAMES}
    for k, v in losses.items():
        if k not in out:
            raise KeyError(f"unknown loss component {k!r}")
    return out


def _weights_for(losses: Dict[str, Tensor], weights: Optional[Dict[str, float]]) -> Dict[str, float]:
    w = {name: (1.0 if name in losses else 0.0) for name in obj.LOSS_NAMES}
    if weights:
        w.update({k: v for k, v in weights.items() if k in losses})
    return w


# ---------------------------------------------------------------------------
# staged pre-training driver


class Ledger:
    """Line-delimited per-epoch loss records plus a sidecar of wall-clock timings."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.records: List[Dict] = []
        self._t0 = perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def timing_path(self) -> Optional[Path]:
        return self.path.with_name(self.path.name + ".times") if self.path else None

    def append(self, record: Dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            with self.timing_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"stage": record["stage"], "epoch": record["epoch"], "wall_time": perf_counter() - self._t0}) + "\n")


def _adam_extra(state: AdamState) -> Dict[str, np.ndarray]:
    extra = {f"adam.m.{k}": v for k, v in state.first_moment.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.second_moment.items()})
    return extra


def _restore_adam(extra: Dict[str, np.ndarray], lr: float, step_count: int) -> AdamState:
    state = AdamState(learning_rate=lr, step_count=step_count)
    for k, v in extra.items():
        if k.startswith("adam.m."):
            state.first_moment[k[len("adam.m."):]] = v.copy()
        elif k.startswith("adam.v."):
            state.second_moment[k[len("adam.v."):]] = v.copy()
    return state


@dataclass
class PretrainResult:
    params: ModelParameters
    ledger: List[Dict] = field(default_factory=list)


def run_stage(
    params: ModelParameters,
    pairs: Sequence[ClipTextPair],
    cfg: TrainConfig,
    stage: int,
    ledger: Optional[Ledger] = None,
    checkpoint: Optional[Path] = None,
    resume: Optional[Tuple[int, AdamState]] = None,
    meta: Optional[Dict] = None,
) -> ModelParameters:
    """Run stage 1 (encoders, joint loss only) or stage 2 (everything, all objectives)."""
    pairs = list(pairs)
    clips_by_video: Dict[str, Dict[int, np.ndarray]] = {}
    for p in pairs:
        clips_by_video.setdefault(p.video_id, {})[p.clip_index] = p.frames
    if stage == 1:
        prefixes, epochs, lr = ENCODER_PREFIXES, cfg.stage1_epochs, cfg.stage1_lr

        def loss_fn(idx, rng):
            return stage1_losses(params, collate([pairs[i] for i in idx]), rng)

    elif stage == 2:
        prefixes, epochs, lr = ("",), cfg.stage2_epochs, cfg.stage2_lr

        def loss_fn(idx, rng):
            return pretrain_losses(params, collate([pairs[i] for i in idx]), rng, cfg, clips_by_video)

    else:
        raise ValueError(f"unknown stage {stage}")
    label = f"stage{stage}"
    state = LoopState()
    if resume is not None:
        state.epoch, state.adam = resume
    last_good: List[Optional[Path]] = [checkpoint if checkpoint and checkpoint.exists() else None]

    def on_epoch(record, st: LoopState):
        if ledger is not None:
            ledger.append(record)
        done = st.epoch == epochs
        if checkpoint is not None and (done or (cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0)):
            save_training_checkpoint(checkpoint, params, cfg, stage, st, done, meta)
            last_good[0] = checkpoint

    try:
        optimize(
            params, prefixes, len(pairs), loss_fn, epochs, lr, cfg.warmup_fraction, cfg.batch_size,
            cfg.seed, label, cfg.weights() if stage == 2 else None, cfg.grad_clip, state, on_epoch,
        )
    except obj.NumericFailure as exc:
        raise TrainingAborted(f"{label}: {exc}", last_good[0]) from exc
    if checkpoint is not None and epochs == 0:
        save_training_checkpoint(checkpoint, params, cfg, stage, state, True, meta)
    return params


def save_training_checkpoint(path, params, cfg: TrainConfig, stage: int, state: LoopState, done: bool, meta=None):
    info = dict(meta or {})
    info["train_config"] = asdict(cfg)
    info["train_state"] = {
        "stage": stage,
        "epoch": state.epoch,
        "stage_complete": done,
        "adam_steps": state.adam.step_count if state.adam else 0,
    }
    extra = {} if done or state.adam is None else _adam_extra(state.adam)
    mdl.save_checkpoint(path, params, info, extra)


def resume_point(meta: Dict, extra: Dict[str, np.ndarray], cfg: TrainConfig) -> Tuple[int, int, Optional[AdamState]]:
    """``(next_stage, start_epoch, adam_state)`` for a checkpoint written by :func:`run_stage`."""
    ts = meta.get("train_state")
    if not ts:
        return 1, 0, None
    if ts["stage_complete"]:
        return ts["stage"] + 1, 0, None
    lr = cfg.stage1_lr if ts["stage"] == 1 else cfg.stage2_lr
    return ts["stage"], ts["epoch"], _restore_adam(extra, lr, ts["adam_steps"])


def pretrain(
    params: ModelParameters,
    pairs: Sequence[ClipTextPair],
    cfg: TrainConfig,
    stages: Sequence[int] = (1, 2),
    ledger_path: Optional[Path] = None,
    checkpoint: Optional[Path] = None,
    resume: Optional[Tuple[int, int, AdamState]] = None,
    meta: Optional[Dict] = None,
) -> PretrainResult:
    ledger = Ledger(ledger_path)
    # stage 1 optimises the joint loss alone, so it is skipped when that loss is off
    stages = [s for s in stages if s != 1 or (cfg.stagedp and cfg.weight_joint != 0.0)]
    for stage in stages:
        res = None
        if resume is not None and resume[0] == stage and resume[2] is not None:
            res = (resume[1], resume[2])
        elif resume is not None and resume[0] > stage:
            continue
        run_stage(params, pairs, cfg, stage, ledger, checkpoint, res, meta)
    return PretrainResult(params, ledger.records)
