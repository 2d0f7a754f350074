"""Beam search over a next-token log-probability function.

Finished hypotheses are ranked by log-probability divided by the number of
generated tokens (EOS included). Candidate expansion is ordered by score,
then by parent rank, then by token id, so results are fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

StepFn = Callable[[List[List[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: List[int] = field(default_factory=list)  # generated ids, BOS excluded
    logprob: float = 0.0
    finished: bool = False

    def normalized(self) -> float:
        return self.logprob / max(len(self.tokens), 1)


def beam_search(step_fn: StepFn, bos: int, eos: int, beam_size: int = 5, max_len: int = 20) -> Hypothesis:
    """Best finished hypothesis.

    ``step_fn(prefixes)`` receives equal-length prefixes (each starting with
    ``bos``) and returns next-token log-probabilities ``[len(prefixes), V]``.
    A hypothesis still alive after ``max_len`` generated tokens is force-finished
    as is; no EOS step is scored or appended.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    alive = [Hypothesis([], 0.0)]
    finished: List[Hypothesis] = []
    for t in range(max_len):
        logp = np.asarray(step_fn([[bos] + h.tokens for h in alive]), dtype=np.float64)
        if logp.shape[0] != len(alive):
            raise ValueError("step function returned the wrong number of rows")
        vocab = logp.shape[1]
        total = np.array([h.logprob for h in alive])[:, None] + logp
        parent = np.repeat(np.arange(len(alive)), vocab)
        token = np.tile(np.arange(vocab), len(alive))
        flat = total.reshape(-1)
        order = np.lexsort((token, parent, -flat))
        nxt: List[Hypothesis] = []
        for rank, k in enumerate(order):
            hyp = Hypothesis(alive[parent[k]].tokens + [int(token[k])], float(flat[k]))
            if token[k] == eos:
                if rank < beam_size:
                    hyp.finished = True
                    finished.append(hyp)
                continue
            nxt.append(hyp)
            if len(nxt) == beam_size:
                break
        if len(finished) >= beam_size or not nxt:
            break
        alive = nxt
        if t == max_len - 1:
            for h in alive:
                h.finished = True
            finished.extend(alive)
    # stable: on equal normalized score the earlier-finished hypothesis wins
    return max(enumerate(finished), key=lambda kv: (kv[1].normalized(), -kv[0]))[1]


def greedy_decode(step_fn: StepFn, bos: int, eos: int, max_len: int = 20) -> Hypothesis:
    tokens: List[int] = []
    score = 0.0
    for _ in range(max_len):
        logp = np.asarray(step_fn([[bos] + tokens]), dtype=np.float64)[0]
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        tokens.append(tok)
        if tok == eos:
            break
    return Hypothesis(tokens, score, True)


def table_step_fn(table: Sequence[np.ndarray]) -> StepFn:
    """Step function driven by ``table[t][i]``: log-probs at step t for the i-th alive prefix.

    Convenience for tests with hand-built distributions; ``table[t]`` may be
    a single row shared by every prefix, or a dict keyed by prefix tuple.
    """

    def step(prefixes):
        t = len(prefixes[0]) - 1
        entry = table[t]
        if isinstance(entry, dict):
            return np.stack([np.asarray(entry[tuple(p[1:])], dtype=np.float64) for p in prefixes])
        row = np.asarray(entry, dtype=np.float64)
        return np.tile(row, (len(prefixes), 1))

    return step
