"""Automatic evaluation metrics: unigram F1, BLEU, ROUGE, distinct-n,
Recall@k. All pure functions over token lists."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, DataError


def _require_nonempty(*seqs):
    for s in seqs:
        if not s:
            raise DataError("metric input sequence is empty")


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def unigram_f1(hyp, ref) -> float:
    """F1 of the clipped unigram-multiset overlap between hyp and ref."""
    _require_nonempty(hyp, ref)
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(hyp)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def bleu(hyp, ref, max_n=4, smooth=False) -> dict[int, float]:
    """Sentence-pair BLEU-n for n = 1..max_n via corpus_bleu on one pair."""
    return corpus_bleu([hyp], [ref], max_n=max_n, smooth=smooth)


def corpus_bleu(hyps, refs, max_n=4, smooth=False) -> dict[int, float]:
    """Corpus-level clipped n-gram precision with brevity penalty.

    BLEU-n is the geometric mean of precisions of orders 1..n times the
    brevity penalty. With smooth=True, add-one smoothing is applied to
    orders >= 2 (sentence-level use); the corpus-level default is unsmoothed.
    """
    if len(hyps) != len(refs) or not hyps:
        raise ConfigError("corpus_bleu needs equally many non-zero hyps and refs")
    for h, r in zip(hyps, refs):
        _require_nonempty(h, r)
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))

    log_precisions = []
    for n in range(1, max_n + 1):
        match, total = 0, 0
        for h, r in zip(hyps, refs):
            h_counts = Counter(_ngrams(h, n))
            r_counts = Counter(_ngrams(r, n))
            match += sum((h_counts & r_counts).values())
            total += sum(h_counts.values())
        if smooth and n >= 2:
            match, total = match + 1, total + 1
        if total == 0 or match == 0:
            log_precisions.append(None)
        else:
            log_precisions.append(math.log(match / total))

    out = {}
    for n in range(1, max_n + 1):
        logs = log_precisions[:n]
        if any(lp is None for lp in logs):
            out[n] = 0.0
        else:
            out[n] = bp * math.exp(sum(logs) / n)
    return out


def _fmeasure(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _rouge_n(hyp, ref, n) -> float:
    h_counts = Counter(_ngrams(hyp, n))
    r_counts = Counter(_ngrams(ref, n))
    overlap = sum((h_counts & r_counts).values())
    h_total = sum(h_counts.values())
    r_total = sum(r_counts.values())
    if h_total == 0 or r_total == 0 or overlap == 0:
        return 0.0
    return _fmeasure(overlap / h_total, overlap / r_total)


def _lcs_length(a, b) -> int:
    # classic O(|a|*|b|) dynamic program, one rolling row
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(hyp, ref) -> dict[str, float]:
    """ROUGE-1/2 n-gram F-measures and ROUGE-L (LCS F-measure)."""
    _require_nonempty(hyp, ref)
    lcs = _lcs_length(hyp, ref)
    rl = _fmeasure(lcs / len(hyp), lcs / len(ref)) if lcs else 0.0
    return {"R1": _rouge_n(hyp, ref, 1), "R2": _rouge_n(hyp, ref, 2), "RL": rl}


def distinct(hyps, n) -> float:
    """Unique n-grams across all hypotheses divided by total n-gram count."""
    total, unique = 0, set()
    for h in hyps:
        grams = _ngrams(h, n)
        total += len(grams)
        unique.update(grams)
    if total == 0:
        raise DataError(f"distinct-{n}: no n-grams in corpus")
    return len(unique) / total


def recall_at_k(rankings, k) -> float:
    """Fraction of (scores, true_index) pairs where the true candidate is
    among the k highest-scoring ones. Ties broken by lowest index."""
    if not rankings:
        raise ConfigError("recall_at_k: empty rankings")
    hits = 0
    for scores, true_index in rankings:
        if not 1 <= k <= len(scores):
            raise ConfigError(f"recall_at_k: k={k} out of range for {len(scores)} candidates")
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        if true_index in order[:k]:
            hits += 1
    return hits / len(rankings)


@dataclass
class MetricsReport:
    """Flat bundle of generation and selection metrics (all in [0, 1])."""

    bleu: dict[int, float] = field(default_factory=dict)
    rouge: dict[str, float] = field(default_factory=dict)
    distinct: dict[int, float] = field(default_factory=dict)
    f1: float = 0.0
    recall_at: dict[int, float] = field(default_factory=dict)

    def to_dict(self):
        return {
            "bleu": {str(n): v for n, v in self.bleu.items()},
            "rouge": dict(self.rouge),
            "distinct": {str(n): v for n, v in self.distinct.items()},
            "f1": self.f1,
            "recall": {str(k): v for k, v in self.recall_at.items()},
        }


def report_generation(hyps, refs) -> MetricsReport:
    """Aggregate BLEU/ROUGE/distinct/F1 over parallel hyp/ref corpora."""
    rep = MetricsReport()
    rep.bleu = corpus_bleu(hyps, refs)
    rouge_scores = [rouge(h, r) for h, r in zip(hyps, refs)]
    rep.rouge = {
        key: sum(s[key] for s in rouge_scores) / len(rouge_scores)
        for key in ("R1", "R2", "RL")
    }
    rep.distinct = {n: distinct(hyps, n) for n in (1, 2)}
    rep.f1 = sum(unigram_f1(h, r) for h, r in zip(hyps, refs)) / len(hyps)
    return rep
