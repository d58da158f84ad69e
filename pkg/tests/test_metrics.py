import math
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from memdial.errors import ConfigError, DataError
from memdial.metrics import (bleu, corpus_bleu, distinct, recall_at_k,
                             report_generation, rouge, unigram_f1)

TOKENS = st.lists(st.sampled_from("a b c d e".split()), min_size=1, max_size=12)


# ---------------------------------------------------------------------------
# unigram F1
# ---------------------------------------------------------------------------


def test_f1_identity():
    assert unigram_f1(["a", "b", "c"], ["a", "b", "c"]) == 1.0


def test_f1_disjoint():
    assert unigram_f1(["a", "b"], ["c", "d"]) == 0.0


def test_f1_partial_overlap():
    # overlap 2 of 3 on both sides -> P = R = F1 = 2/3
    assert unigram_f1(["a", "b", "c"], ["a", "b", "d"]) == pytest.approx(2 / 3, abs=1e-6)


def test_f1_empty_input_rejected():
    with pytest.raises(DataError):
        unigram_f1([], ["a"])


@given(TOKENS, TOKENS)
def test_f1_symmetric_and_bounded(hyp, ref):
    v = unigram_f1(hyp, ref)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(unigram_f1(ref, hyp), abs=1e-12)


@given(TOKENS, TOKENS)
def test_f1_matches_direct_formula(hyp, ref):
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    if overlap == 0:
        expected = 0.0
    else:
        p, r = overlap / len(hyp), overlap / len(ref)
        expected = 2 * p * r / (p + r)
    assert unigram_f1(hyp, ref) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_identity():
    scores = bleu(list("abc"), list("abc"))
    for n in (1, 2, 3):
        assert scores[n] == pytest.approx(1.0, abs=1e-12)


def test_bleu_no_unigram_overlap():
    assert bleu(["a", "b"], ["c", "d"])[1] == 0.0


def _reference_bleu(hyps, refs, max_n):
    """Independently written n-gram counter for cross-checking."""
    def grams(seq, n):
        out = {}
        for i in range(len(seq) - n + 1):
            key = tuple(seq[i:i + n])
            out[key] = out.get(key, 0) + 1
        return out

    h_len = sum(map(len, hyps))
    r_len = sum(map(len, refs))
    bp = 1.0 if h_len > r_len else math.exp(1 - r_len / h_len)
    precisions = []
    for n in range(1, max_n + 1):
        num = den = 0
        for h, r in zip(hyps, refs):
            hg, rg = grams(h, n), grams(r, n)
            num += sum(min(c, rg.get(g, 0)) for g, c in hg.items())
            den += sum(hg.values())
        precisions.append(num / den if den else 0.0)
    out = {}
    for n in range(1, max_n + 1):
        if any(p == 0 for p in precisions[:n]):
            out[n] = 0.0
        else:
            out[n] = bp * math.exp(sum(math.log(p) for p in precisions[:n]) / n)
    return out


def test_bleu_partial_overlap_cross_check():
    hyps = [["a", "b", "c", "d"], ["a", "a", "b"]]
    refs = [["a", "b", "x", "d", "e"], ["a", "b", "b"]]
    got = corpus_bleu(hyps, refs)
    want = _reference_bleu(hyps, refs, 4)
    for n in (1, 2, 3, 4):
        assert got[n] == pytest.approx(want[n], abs=1e-6)


@given(st.lists(st.tuples(TOKENS, TOKENS), min_size=1, max_size=5))
def test_bleu_matches_reference_on_random_corpora(pairs):
    hyps = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    got = corpus_bleu(hyps, refs)
    want = _reference_bleu(hyps, refs, 4)
    for n in (1, 2, 3, 4):
        assert got[n] == pytest.approx(want[n], abs=1e-9)


def test_bleu_brevity_penalty_applied():
    # hyp shorter than ref with perfect precision: BLEU-1 = exp(1 - r/h)
    scores = bleu(["a", "b"], ["a", "b", "c", "d"])
    assert scores[1] == pytest.approx(math.exp(1 - 4 / 2), abs=1e-9)


def test_bleu_length_mismatch_rejected():
    with pytest.raises(ConfigError):
        corpus_bleu([["a"]], [])


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def test_rouge_identity():
    scores = rouge(list("abcd"), list("abcd"))
    assert scores == {"R1": 1.0, "R2": 1.0, "RL": 1.0}


def test_rouge_disjoint():
    scores = rouge(["a", "b"], ["c", "d"])
    assert scores == {"R1": 0.0, "R2": 0.0, "RL": 0.0}


def test_rouge_l_known_lcs():
    # LCS("a b c d", "a c b d") = "a b d" or "a c d", length 3.
    # P = R = 3/4 -> F = 3/4.
    scores = rouge(["a", "b", "c", "d"], ["a", "c", "b", "d"])
    assert scores["RL"] == pytest.approx(0.75, abs=1e-6)


def test_rouge_l_unequal_lengths():
    # LCS("a b c", "x a b y c z") = 3; P = 1, R = 1/2 -> F = 2/3
    scores = rouge(["a", "b", "c"], ["x", "a", "b", "y", "c", "z"])
    assert scores["RL"] == pytest.approx(2 / 3, abs=1e-6)


@given(TOKENS, TOKENS)
def test_rouge_bounded(hyp, ref):
    scores = rouge(hyp, ref)
    for v in scores.values():
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# distinct-n
# ---------------------------------------------------------------------------


def test_distinct_all_unique():
    assert distinct([["a", "b", "c"]], 1) == 1.0


def test_distinct_repeated_token():
    assert distinct([["a", "a", "a", "a"]], 1) == 0.25


def test_distinct_duplicated_corpus_halves():
    corpus = [["a", "b"], ["c", "d"]]
    once = distinct(corpus, 1)
    twice = distinct(corpus + corpus, 1)
    assert once == 1.0
    assert twice == pytest.approx(0.5, abs=1e-12)


def test_distinct_empty_rejected():
    with pytest.raises(DataError):
        distinct([["a"]], 2)  # no bigrams anywhere


# ---------------------------------------------------------------------------
# Recall@k
# ---------------------------------------------------------------------------


def test_recall_true_index_top():
    rankings = [([0.1, 0.9, 0.2], 1), ([0.7, 0.1, 0.05], 0)]
    assert recall_at_k(rankings, 1) == 1.0


def test_recall_k_equals_num_candidates():
    rankings = [([0.2, 0.3, 0.5], i) for i in range(3)]
    assert recall_at_k(rankings, 3) == 1.0


def test_recall_tie_breaks_to_lowest_index():
    # all scores equal: index 0 wins rank 1
    rankings = [([0.5, 0.5], 0), ([0.5, 0.5], 1)]
    assert recall_at_k(rankings, 1) == 0.5


def test_recall_uniform_random_scores_monte_carlo():
    import numpy as np

    rng = np.random.default_rng(7)
    rankings = [(rng.random(10).tolist(), int(rng.integers(10)))
                for _ in range(10_000)]
    assert recall_at_k(rankings, 1) == pytest.approx(0.1, abs=0.01)


def test_recall_k_out_of_range():
    with pytest.raises(ConfigError):
        recall_at_k([([0.5, 0.5], 0)], 3)


# ---------------------------------------------------------------------------
# aggregate report
# ---------------------------------------------------------------------------


def test_report_schema():
    hyps = [["a", "b", "c"], ["a", "d"]]
    refs = [["a", "b", "x"], ["a", "d"]]
    rep = report_generation(hyps, refs)
    d = rep.to_dict()
    assert set(d) == {"bleu", "rouge", "distinct", "f1", "recall"}
    assert set(d["rouge"]) == {"R1", "R2", "RL"}
    assert set(d["distinct"]) == {"1", "2"}
    assert 0.0 <= d["f1"] <= 1.0
