"""Evaluation metrics: retrieval ranks, corpus BLEU, ROUGE-L, frame accuracy, localization recall, sentiment."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalResult:
    scores: np.ndarray
    ranks: np.ndarray
    r1: float
    r5: float
    r10: float
    median_r: float

    def as_dict(self) -> Dict[str, float]:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "MedianR": self.median_r}


def ground_truth_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of candidate i for query i; equal scores rank the lower candidate index first."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] == 0:
        raise ValueError("retrieval needs a non-empty [queries x candidates] score matrix")
    if s.shape[0] > s.shape[1]:
        raise ValueError("every query needs its own ground-truth candidate")
    q = s.shape[0]
    gt = s[np.arange(q), np.arange(q)][:, None]
    cols = np.arange(s.shape[1])[None, :]
    ahead = (s > gt) | ((s == gt) & (cols < np.arange(q)[:, None]))
    return 1 + ahead.sum(axis=1)


def retrieval_metrics(scores: np.ndarray) -> RetrievalResult:
    ranks = ground_truth_ranks(scores)
    return RetrievalResult(
        np.asarray(scores, dtype=np.float64),
        ranks,
        float(np.mean(ranks <= 1)),
        float(np.mean(ranks <= 5)),
        float(np.mean(ranks <= 10)),
        float(np.median(ranks)),
    )


# ---------------------------------------------------------------------------
# generation metrics


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]], max_n: int = 4) -> float:
    """Corpus BLEU with clipped n-gram counts, uniform weights and brevity penalty (no smoothing).

    ``references[i]`` is a list of reference token lists for ``candidates[i]``;
    the effective reference length is the one closest to the candidate length
    (shorter wins ties).
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not references or any(len(refs) == 0 for refs in references):
        raise ValueError("every candidate needs at least one reference")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            ceiling: Counter = Counter()
            for r in refs:
                ceiling |= _ngrams(list(r), n)
            matches[n - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """ROUGE-L F1 (beta = 1) between two token lists."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def mean_rouge_l(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]]) -> float:
    if not references or any(len(refs) == 0 for refs in references):
        raise ValueError("every candidate needs at least one reference")
    return float(np.mean([max(rouge_l(c, r) for r in refs) for c, refs in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# action tasks


def frame_accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    predicted = np.asarray(predicted)
    gold = np.asarray(gold)
    if gold.size == 0:
        raise ValueError("frame accuracy over zero frames")
    if predicted.shape != gold.shape:
        raise ValueError(f"{predicted.shape} predictions for {gold.shape} labels")
    return float(np.mean(predicted == gold))


def average_recall(scores: Sequence[np.ndarray], segments: Sequence[np.ndarray]) -> Tuple[float, float]:
    """Fraction of steps whose top-scoring frame lies in its ground-truth segment.

    ``segments[k]`` is a boolean mask over the frames of step k's video.
    Returns ``(recall, chance)`` where chance is the mean segment coverage,
    the expected recall of a uniformly random scorer. Steps with an empty
    segment are skipped.
    """
    hits, chance = [], []
    for s, seg in zip(scores, segments):
        seg = np.asarray(seg, dtype=bool)
        if not seg.any():
            log.warning("step with no annotated frames skipped")
            continue
        hits.append(bool(seg[int(np.argmax(s))]))
        chance.append(seg.mean())
    if not hits:
        raise ValueError("no localizable steps")
    return float(np.mean(hits)), float(np.mean(chance))


# ---------------------------------------------------------------------------
# sentiment


def _weighted_f1(pred: np.ndarray, gold: np.ndarray) -> float:
    out = 0.0
    for cls in (False, True):
        tp = np.sum((pred == cls) & (gold == cls))
        fp = np.sum((pred == cls) & (gold != cls))
        fn = np.sum((pred != cls) & (gold == cls))
        denom = 2 * tp + fp + fn
        f1 = 0.0 if denom == 0 else 2 * tp / denom
        out += f1 * np.mean(gold == cls)
    return float(out)


def sentiment_metrics(predictions: Sequence[float], labels: Sequence[float]) -> Dict[str, float]:
    """MAE and Pearson correlation on raw scores; binary accuracy and weighted F1 on the sign,
    excluding items whose label is exactly zero. An undefined correlation is reported as NaN."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be non-empty and equally long")
    mae = float(np.mean(np.abs(p - y)))
    if np.std(p) == 0 or np.std(y) == 0:
        log.warning("correlation undefined for constant predictions or labels")
        corr = float("nan")
    else:
        corr = float(np.corrcoef(p, y)[0, 1])
    nz = y != 0
    if nz.any():
        pb = p[nz] >= 0
        yb = y[nz] > 0
        ba = float(np.mean(pb == yb))
        f1 = _weighted_f1(pb, yb)
    else:
        ba = f1 = float("nan")
    return {"BA": ba, "F1": f1, "MAE": mae, "Corr": corr}
