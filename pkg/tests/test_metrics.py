import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import f1_score

from univl import metrics as M

from . import oracles

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=0, max_size=7)


# ---------------------------------------------------------------------------
# retrieval


def test_identity_scores_rank_first():
    r = M.retrieval_metrics(np.eye(6) + 0.1)
    assert (r.r1, r.r5, r.r10, r.median_r) == (1.0, 1.0, 1.0, 1.0)
    assert set(r.as_dict()) == {"R@1", "R@5", "R@10", "MedianR"}


def test_anti_diagonal_median_rank():
    s = np.fliplr(np.eye(10)) + np.random.default_rng(0).random((10, 10)) * 0.01
    r = M.retrieval_metrics(s)
    assert list(r.ranks) == oracles.rank_by_sort(s)
    assert r.median_r == float(np.median(oracles.rank_by_sort(s)))


def test_ties_break_by_candidate_index():
    assert list(M.ground_truth_ranks(np.zeros((3, 3)))) == [1, 2, 3]
    assert list(M.ground_truth_ranks(np.ones((1, 1)))) == [1]


def test_retrieval_errors():
    with pytest.raises(ValueError):
        M.ground_truth_ranks(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        M.ground_truth_ranks(np.zeros((3, 2)))


@given(st.integers(0, 100_000), st.integers(1, 50), st.integers(0, 10))
def test_ranks_match_sort_oracle(seed, q, extra):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 4, size=(q, q + extra)).astype(float)  # plenty of ties
    r = M.retrieval_metrics(s)
    assert list(r.ranks) == oracles.rank_by_sort(s)
    assert r.r1 <= r.r5 <= r.r10


# ---------------------------------------------------------------------------
# BLEU / ROUGE


def test_bleu_identity_and_empty():
    refs = [["first", "pour", "then", "stir", "done"], ["first", "mix", "then", "boil", "done"]]
    assert M.corpus_bleu(refs, [[r] for r in refs]) == 1.0
    assert M.mean_rouge_l(refs, [[r] for r in refs]) == 1.0
    assert M.corpus_bleu([[]], [[refs[0]]]) == 0.0
    with pytest.raises(ValueError):
        M.corpus_bleu([["a"]], [[]])


def test_bleu_hand_computed_fixture():
    cands = ["the cat sat on the mat".split(), "a dog ran".split()]
    refs = [["the cat is on the mat".split()], ["a dog ran fast".split()]]
    # clipped matches / totals, summed over both sentences:
    #   1-grams 5/6 + 3/3 = 8/9,  2-grams 3/5 + 2/2 = 5/7,  3-grams 1/4 + 1/1 = 2/5,  4-grams 0/3
    # lengths c = 9, r = 10 so BP = exp(1 - 10/9)
    expected3 = math.exp(1 - 10 / 9) * (8 / 9 * 5 / 7 * 2 / 5) ** (1 / 3)
    assert abs(M.corpus_bleu(cands, refs, max_n=3) - expected3) < 1e-12
    assert M.corpus_bleu(cands, refs, max_n=4) == 0.0


def test_bleu_takes_closest_reference_length():
    cand = ["a", "b", "c"]
    one = M.corpus_bleu([cand], [[["a", "b", "c", "d", "e", "f"], ["a", "b", "c", "d"]]], max_n=1)
    assert abs(one - math.exp(1 - 4 / 3)) < 1e-12


@given(st.lists(st.tuples(words, words), min_size=1, max_size=4))
def test_bleu_matches_oracle(pairs):
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    got = M.corpus_bleu(cands, [[r] for r in refs])
    assert abs(got - oracles.bleu(cands, refs)) < 1e-8


@given(words, words)
def test_rouge_matches_brute_force(c, r):
    assert M.lcs_length(c, r) == oracles.lcs_brute(c, r)
    assert abs(M.rouge_l(c, r) - oracles.rouge_l(c, r)) < 1e-8


# ---------------------------------------------------------------------------
# frame, localization, sentiment


def test_frame_accuracy():
    assert M.frame_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert M.frame_accuracy([2, 3, 1], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        M.frame_accuracy([], [])


def test_average_recall_peak_and_skip(caplog):
    seg = np.array([False, True, True, False])
    assert M.average_recall([np.array([0, 5, 1, 0])], [seg]) == (1.0, 0.5)
    recall, chance = M.average_recall([np.array([0, 5, 1, 0]), np.zeros(4)], [seg, np.zeros(4, bool)])
    assert recall == 1.0 and "skipped" in caplog.text
    with pytest.raises(ValueError):
        M.average_recall([np.zeros(3)], [np.zeros(3, bool)])


def test_random_scorer_recall_matches_coverage():
    rng = np.random.default_rng(0)
    segs, scores = [], []
    for _ in range(5000):
        seg = np.zeros(10, bool)
        start = rng.integers(0, 8)
        seg[start : start + rng.integers(1, 3)] = True
        segs.append(seg)
        scores.append(rng.random(10))
    recall, chance = M.average_recall(scores, segs)
    assert abs(recall - chance) < 0.02


def test_sentiment_identities():
    y = np.array([-2.0, -0.5, 0.0, 1.0, 2.5])
    same = M.sentiment_metrics(y, y)
    assert same["MAE"] == 0.0 and abs(same["Corr"] - 1.0) < 1e-12 and same["BA"] == 1.0 and same["F1"] == 1.0
    assert abs(M.sentiment_metrics(-y, y)["Corr"] + 1.0) < 1e-12


def test_sentiment_five_point_fixture():
    out = M.sentiment_metrics([1, 2, 3, 4, 5], [2, 2, 3, 5, 3])
    # |errors| = 1, 0, 0, 1, 2; deviations (-2,-1,0,1,2) and (-1,-1,0,2,0): cov 5, ss 10 and 6
    assert abs(out["MAE"] - 0.8) < 1e-12
    assert abs(out["Corr"] - 5 / math.sqrt(60)) < 1e-12


def test_constant_predictions_give_nan_correlation(caplog):
    out = M.sentiment_metrics([1.0, 1.0, 1.0], [1.0, -1.0, 2.0])
    assert math.isnan(out["Corr"]) and "undefined" in caplog.text


@given(st.integers(0, 100_000))
def test_weighted_f1_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice([-2.0, -1.0, 0.0, 1.0, 2.0], size=12)
    preds = rng.normal(0, 1.5, size=12)
    out = M.sentiment_metrics(preds, labels)
    nz = labels != 0
    if not nz.any():
        return
    yb, pb = labels[nz] > 0, preds[nz] >= 0
    assert abs(out["F1"] - f1_score(yb, pb, average="weighted", zero_division=0)) < 1e-12
    assert abs(out["BA"] - np.mean(yb == pb)) < 1e-12
