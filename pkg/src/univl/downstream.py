"""Fine-tuning and evaluation for the downstream tasks.

Task inputs are derived from a :class:`~univl.data.Corpus`:

* retrieval: caption queries against clip frame features (ground truth on the diagonal);
* caption: transcript + frames in, caption words out;
* segmentation: per-frame concept labels from the video encoder alone;
* localization: zero-shot, one step per concept word of a video, scored on every frame;
* sentiment: transcript + frames in, the clip's real-valued score out.

Alignment retrieval costs one cross-encoder pass per (query, candidate) pair,
so it is quadratic in corpus size; joint retrieval embeds each side once.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as mdl
from . import objectives as obj
from . import tensor as F
from .beam import Hypothesis, beam_search
from .blocks import Runtime
from .config import FieldError
from .data import ClipTextPair, Corpus, Vocabulary, pad_frames, pad_tokens
from .masking import IGNORE
from .metrics import (
    RetrievalResult,
    average_recall,
    corpus_bleu,
    frame_accuracy,
    mean_rouge_l,
    retrieval_metrics,
    sentiment_metrics,
)
from .model import ModelParameters
from .pretrain import optimize
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TASKS = ("retrieval-joint", "retrieval-align", "caption", "segmentation", "localization", "sentiment")
REPORT_FIELDS = ("task", "metric", "value", "checkpoint_hash", "corpus_seed")
EVAL_CHUNK = 128


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 16
    warmup_fraction: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0
    beam_size: int = 5

    def __post_init__(self):
        if self.epochs < 0:
            raise FieldError("epochs", "must be non-negative")
        if self.lr <= 0:
            raise FieldError("lr", "must be positive")
        if self.batch_size < 2:
            raise FieldError("batch_size", "must be at least 2")
        if not 0.0 <= self.warmup_fraction <= 0.5:
            raise FieldError("warmup_fraction", "must lie in [0, 0.5]")
        if self.beam_size < 1:
            raise FieldError("beam_size", "must be at least 1")


def _train(params, prefixes, n, loss_fn, cfg: FinetuneConfig, label: str) -> ModelParameters:
    optimize(params, prefixes, n, loss_fn, cfg.epochs, cfg.lr, cfg.warmup_fraction, cfg.batch_size, cfg.seed, label, None, cfg.grad_clip)
    return params


def _chunks(n: int, size: int = EVAL_CHUNK):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


# ---------------------------------------------------------------------------
# retrieval


def retrieval_pairs(corpus: Corpus, split: str) -> List[ClipTextPair]:
    return corpus.pairs(split, "caption")


def embed_texts(params: ModelParameters, rows: Sequence[Sequence[int]]) -> np.ndarray:
    out = []
    with no_grad():
        for idx in _chunks(len(rows)):
            toks, keep = pad_tokens([rows[i] for i in idx])
            out.append(F.mean_pool(mdl.encode_text(toks, keep, params), keep).data)
    return np.concatenate(out)


def embed_clips(params: ModelParameters, clips: Sequence[np.ndarray]) -> np.ndarray:
    out = []
    with no_grad():
        for idx in _chunks(len(clips)):
            frames, keep = pad_frames([clips[i] for i in idx])
            out.append(F.mean_pool(mdl.encode_video(frames, keep, params), keep).data)
    return np.concatenate(out)


def _check_retrieval_inputs(queries, clips):
    if len(clips) == 0:
        raise TaskError("retrieval needs at least one candidate clip")
    if len(queries) == 0:
        raise TaskError("retrieval needs at least one query")


def joint_scores(params: ModelParameters, queries: Sequence[Sequence[int]], clips: Sequence[np.ndarray]) -> np.ndarray:
    _check_retrieval_inputs(queries, clips)
    return embed_texts(params, queries) @ embed_clips(params, clips).T


def align_scores(params: ModelParameters, queries: Sequence[Sequence[int]], clips: Sequence[np.ndarray]) -> np.ndarray:
    """``[Q, C]`` cross-encoder CLS scores; Q*C cross passes."""
    _check_retrieval_inputs(queries, clips)
    toks, tkeep = pad_tokens(list(queries))
    frames, vkeep = pad_frames(list(clips))
    Q, C = len(queries), len(clips)
    out = np.empty(Q * C)
    with no_grad():
        T = mdl.encode_text(toks, tkeep, params)
        V = mdl.encode_video(frames, vkeep, params)
        ti, vi = np.divmod(np.arange(Q * C), C)
        for idx in _chunks(Q * C, 4 * EVAL_CHUNK):
            out[idx] = obj.pair_scores(T, V, tkeep, vkeep, ti[idx], vi[idx], params).data
    return out.reshape(Q, C)


def retrieve_joint(params: ModelParameters, queries, clips) -> RetrievalResult:
    return retrieval_metrics(joint_scores(params, queries, clips))


def retrieve_align(params: ModelParameters, queries, clips) -> RetrievalResult:
    return retrieval_metrics(align_scores(params, queries, clips))


def finetune_retrieval_joint(params: ModelParameters, pairs: Sequence[ClipTextPair], cfg: FinetuneConfig) -> ModelParameters:
    """Joint loss on (caption, clip) pairs; only the single-modal encoders move."""
    pairs = list(pairs)

    def loss_fn(idx, rng):
        toks, tkeep = pad_tokens([pairs[i].tokens for i in idx])
        frames, vkeep = pad_frames([pairs[i].frames for i in idx])
        rt = Runtime(train=True, rng=rng)
        T = mdl.encode_text(toks, tkeep, params, rt)
        V = mdl.encode_video(frames, vkeep, params, rt)
        th, vh = mdl.joint_embeddings(T, V, tkeep, vkeep)
        return {"joint": obj.loss_joint(th, vh, np.eye(len(idx), dtype=bool))}

    return _train(params, ("text.", "video."), len(pairs), loss_fn, cfg, "ft-retrieval-joint")


def finetune_retrieval_align(params: ModelParameters, pairs: Sequence[ClipTextPair], cfg: FinetuneConfig) -> ModelParameters:
    """Alignment loss with every other in-batch clip as a negative."""
    pairs = list(pairs)

    def loss_fn(idx, rng):
        B = len(idx)
        toks, tkeep = pad_tokens([pairs[i].tokens for i in idx])
        frames, vkeep = pad_frames([pairs[i].frames for i in idx])
        rt = Runtime(train=True, rng=rng)
        T = mdl.encode_text(toks, tkeep, params, rt)
        V = mdl.encode_video(frames, vkeep, params, rt)
        order = [[i] + [j for j in range(B) if j != i] for i in range(B)]
        ti = np.repeat(np.arange(B), B)
        vi = np.array([j for row in order for j in row])
        s = obj.pair_scores(T, V, tkeep, vkeep, ti, vi, params, rt)
        return {"align": obj.loss_align(F.reshape(s, (B, B)))}

    return _train(params, ("",), len(pairs), loss_fn, cfg, "ft-retrieval-align")


# ---------------------------------------------------------------------------
# captioning


@dataclass
class CaptionExample:
    tokens: List[int]
    frames: np.ndarray
    caption: List[int]  # words only


def caption_examples(corpus: Corpus, split: str) -> List[CaptionExample]:
    out = []
    for r in corpus.split(split):
        tokens = corpus.vocab.frame(r.text, corpus.spec.max_text_len)
        out.append(CaptionExample(tokens, r.frames, corpus.vocab.tokenize(r.caption)))
    return out


def finetune_caption(params: ModelParameters, examples: Sequence[CaptionExample], cfg: FinetuneConfig) -> ModelParameters:
    examples = list(examples)

    def loss_fn(idx, rng):
        toks, tkeep = pad_tokens([examples[i].tokens for i in idx])
        frames, vkeep = pad_frames([examples[i].frames for i in idx])
        rt = Runtime(train=True, rng=rng)
        enc = mdl.encode_all(toks, tkeep, frames, vkeep, params, rt)
        inputs, targets, keep = obj.decoder_io_from_lists([examples[i].caption for i in idx], params.config.bos_id, params.config.eos_id)
        return {"decoder": obj.loss_decoder(inputs, targets, keep, enc.M, enc.memory_keep(), params, rt)}

    return _train(params, ("",), len(examples), loss_fn, cfg, "ft-caption")


def decoder_step_fn(params: ModelParameters, M: Tensor, memory_keep: np.ndarray):
    """Next-token log-probabilities for a beam of prefixes conditioned on one encoded pair."""

    def step(prefixes):
        ids = np.asarray(prefixes, dtype=np.int64)
        rows = np.zeros(len(prefixes), dtype=np.int64)
        with no_grad():
            logits = mdl.decode_step_logits(ids, M[rows], memory_keep[rows], params)
            return F.log_softmax(logits[:, -1, :], axis=-1).data

    return step


def generate(params: ModelParameters, tokens, frames, beam_size: int = 5, max_len: Optional[int] = None) -> Hypothesis:
    c = params.config
    max_len = c.max_gen_len if max_len is None else min(max_len, c.max_gen_len)
    toks, tkeep = pad_tokens([tokens])
    fr, vkeep = pad_frames([frames])
    with no_grad():
        enc = mdl.encode_all(toks, tkeep, fr, vkeep, params)
    return beam_search(decoder_step_fn(params, enc.M, enc.memory_keep()), c.bos_id, c.eos_id, beam_size, max_len)


def _strip(ids: Sequence[int], params: ModelParameters) -> List[int]:
    out = []
    for t in ids:
        if t == params.config.eos_id:
            break
        if t not in params.config.special_ids():
            out.append(int(t))
    return out


def eval_caption(params: ModelParameters, examples: Sequence[CaptionExample], vocab: Vocabulary, beam_size: int = 5) -> Dict[str, float]:
    if not examples:
        raise TaskError("caption evaluation needs at least one reference")
    cands, refs = [], []
    for ex in examples:
        hyp = generate(params, ex.tokens, ex.frames, beam_size)
        cands.append([vocab.tokens[t] for t in _strip(hyp.tokens, params)])
        refs.append([[vocab.tokens[t] for t in ex.caption]])
    return {
        "BLEU-3": corpus_bleu(cands, refs, 3),
        "BLEU-4": corpus_bleu(cands, refs, 4),
        "ROUGE-L": mean_rouge_l(cands, refs),
    }


# ---------------------------------------------------------------------------
# action segmentation


@dataclass
class SegmentationExample:
    frames: np.ndarray
    labels: List[int]


def segmentation_examples(corpus: Corpus, split: str) -> List[SegmentationExample]:
    return [SegmentationExample(r.frames, list(r.frame_labels)) for r in corpus.split(split)]


def _check_labels(params: ModelParameters, examples):
    top = max(max(ex.labels) for ex in examples)
    if top >= params.config.num_frame_labels:
        raise TaskError(f"frame label {top} outside the {params.config.num_frame_labels}-way head")


def finetune_segmentation(params: ModelParameters, examples: Sequence[SegmentationExample], cfg: FinetuneConfig) -> ModelParameters:
    """Per-frame cross-entropy on the video encoder output; the text side is never touched."""
    examples = list(examples)
    _check_labels(params, examples)

    def loss_fn(idx, rng):
        frames, keep = pad_frames([examples[i].frames for i in idx])
        targets = np.full(keep.shape, IGNORE, dtype=np.int64)
        for row, i in enumerate(idx):
            targets[row, : len(examples[i].labels)] = examples[i].labels
        V = mdl.encode_video(frames, keep, params, Runtime(train=True, rng=rng))
        logits = mdl.frame_logits(V, params)
        return {"segmentation": F.cross_entropy(F.reshape(logits, (-1, logits.shape[-1])), targets.reshape(-1), IGNORE)}

    return _train(params, ("video.", "heads.frame."), len(examples), loss_fn, cfg, "ft-segmentation")


def predict_frames(params: ModelParameters, frames: np.ndarray) -> np.ndarray:
    if len(frames) == 0:
        raise TaskError("no frames to label")
    with no_grad():
        return np.argmax(mdl.frame_logits(mdl.encode_video(frames, None, params), params).data, axis=-1)


def eval_segmentation(params: ModelParameters, examples: Sequence[SegmentationExample]) -> Dict[str, float]:
    if not examples:
        raise TaskError("segmentation evaluation over zero clips")
    pred = np.concatenate([predict_frames(params, ex.frames) for ex in examples])
    gold = np.concatenate([np.asarray(ex.labels) for ex in examples])
    return {"frame_accuracy": frame_accuracy(pred, gold)}


# ---------------------------------------------------------------------------
# step localization (zero-shot)


@dataclass
class LocalizationTask:
    video_id: str
    frames: List[np.ndarray]  # one matrix per clip, in clip order
    labels: np.ndarray  # concept per frame over the concatenated video
    steps: List[int]  # concept ids
    step_texts: List[List[int]]


def localization_tasks(corpus: Corpus, split: str) -> List[LocalizationTask]:
    words = corpus.spec.concept_words()
    out = []
    for vid, clips in sorted(corpus.videos(split).items()):
        labels = np.concatenate([np.asarray(r.frame_labels) for r in clips])
        steps = sorted({int(c) for r in clips for c in r.concepts})
        texts = [corpus.vocab.frame(words[c], corpus.spec.max_text_len) for c in steps]
        out.append(LocalizationTask(vid, [r.frames for r in clips], labels, steps, texts))
    return out


def frame_embeddings(params: ModelParameters, clips: Sequence[np.ndarray]) -> np.ndarray:
    """Per-frame video-encoder rows, each clip encoded on its own, concatenated."""
    with no_grad():
        return np.concatenate([mdl.encode_video(c, None, params).data for c in clips])


def step_localization(params: ModelParameters, tasks: Sequence[LocalizationTask]) -> Dict[str, float]:
    """Average recall of argmax-frame localization and the uniform-random expectation."""
    scores, segments = [], []
    for task in tasks:
        rows = frame_embeddings(params, task.frames)
        th = embed_texts(params, task.step_texts)
        for k, concept in enumerate(task.steps):
            scores.append(rows @ th[k])
            segments.append(task.labels == concept)
    recall, chance = average_recall(scores, segments)
    return {"average_recall": recall, "random_baseline": chance}


# ---------------------------------------------------------------------------
# sentiment


@dataclass
class SentimentExample:
    tokens: List[int]
    frames: np.ndarray
    score: float


def sentiment_examples(corpus: Corpus, split: str) -> List[SentimentExample]:
    return [SentimentExample(corpus.vocab.frame(r.text, corpus.spec.max_text_len), r.frames, r.sentiment) for r in corpus.split(split)]


def _sentiment_forward(params, examples, idx, rt=None) -> Tensor:
    toks, tkeep = pad_tokens([examples[i].tokens for i in idx])
    frames, vkeep = pad_frames([examples[i].frames for i in idx])
    enc = mdl.encode_all(toks, tkeep, frames, vkeep, params, rt)
    return mdl.sentiment_score(enc.M[:, 0, :], params)


def finetune_sentiment(params: ModelParameters, examples: Sequence[SentimentExample], cfg: FinetuneConfig) -> ModelParameters:
    """Squared-error regression of the score from the cross-encoder CLS row."""
    examples = list(examples)

    def loss_fn(idx, rng):
        pred = _sentiment_forward(params, examples, idx, Runtime(train=True, rng=rng))
        diff = F.sub(pred, Tensor(np.array([examples[i].score for i in idx])))
        return {"sentiment": F.mean(F.mul(diff, diff))}

    return _train(params, ("",), len(examples), loss_fn, cfg, "ft-sentiment")


def predict_sentiment(params: ModelParameters, examples: Sequence[SentimentExample]) -> np.ndarray:
    with no_grad():
        return np.concatenate([_sentiment_forward(params, examples, idx).data for idx in _chunks(len(examples))])


def eval_sentiment(params: ModelParameters, examples: Sequence[SentimentExample]) -> Dict[str, float]:
    return sentiment_metrics(predict_sentiment(params, examples), [ex.score for ex in examples])


# ---------------------------------------------------------------------------
# task dispatch and reports


def check_task(task: str) -> str:
    if task not in TASKS:
        raise TaskError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    return task


def finetune(task: str, params: ModelParameters, corpus: Corpus, cfg: FinetuneConfig, split: str = "train") -> ModelParameters:
    check_task(task)
    if task == "retrieval-joint":
        return finetune_retrieval_joint(params, retrieval_pairs(corpus, split), cfg)
    if task == "retrieval-align":
        return finetune_retrieval_align(params, retrieval_pairs(corpus, split), cfg)
    if task == "caption":
        return finetune_caption(params, caption_examples(corpus, split), cfg)
    if task == "segmentation":
        return finetune_segmentation(params, segmentation_examples(corpus, split), cfg)
    if task == "sentiment":
        return finetune_sentiment(params, sentiment_examples(corpus, split), cfg)
    raise TaskError("localization is zero-shot and is never fine-tuned")


def evaluate(task: str, params: ModelParameters, corpus: Corpus, split: str = "val", beam_size: int = 5) -> Dict[str, float]:
    check_task(task)
    if task in ("retrieval-joint", "retrieval-align"):
        pairs = retrieval_pairs(corpus, split)
        fn = retrieve_joint if task == "retrieval-joint" else retrieve_align
        return fn(params, [p.tokens for p in pairs], [p.frames for p in pairs]).as_dict()
    if task == "caption":
        out = eval_caption(params, caption_examples(corpus, split), corpus.vocab, beam_size)
        out.update({"METEOR": "N/A", "CIDEr": "N/A"})
        return out
    if task == "segmentation":
        return eval_segmentation(params, segmentation_examples(corpus, split))
    if task == "localization":
        return step_localization(params, localization_tasks(corpus, split))
    return eval_sentiment(params, sentiment_examples(corpus, split))


def report_records(task: str, metrics: Dict[str, float], checkpoint_hash: str, corpus_seed: int) -> List[Dict]:
    out = []
    for name, value in metrics.items():
        if isinstance(value, float) and not np.isfinite(value):
            log.warning("%s/%s is undefined; reported as null", task, name)
            value = None
        out.append(dict(zip(REPORT_FIELDS, (task, name, value, checkpoint_hash, int(corpus_seed)))))
    return out


def write_report(path, records: Sequence[Dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in REPORT_FIELDS}, separators=(",", ":")) + "\n")
