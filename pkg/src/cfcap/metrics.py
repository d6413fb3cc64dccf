"""Hallucination and caption-quality metrics.

All metrics operate on token-id sequences. Phrase presence means a contiguous
token-id subsequence match. Ranking metrics use binary relevance (1 = masked
phrase absent), gain = relevance, discount 1/log2(rank+1), ideal ranking = all
positives first, and nDCG = 0 when no positive exists.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

BLEU_EPSILON = 1e-9


def contains_phrase(tokens, phrase) -> bool:
    """True if `phrase` occurs in `tokens` as a contiguous subsequence."""
    tokens, phrase = list(tokens), list(phrase)
    if not phrase:
        raise ValueError("empty phrase")
    n, m = len(tokens), len(phrase)
    return any(tokens[i : i + m] == phrase for i in range(n - m + 1))


def chair_s(items) -> float:
    """Fraction of captions that mention their masked phrase.

    items: iterable of (caption tokens, masked phrase tokens).
    """
    items = list(items)
    if not items:
        raise ValueError("empty caption set")
    hits = sum(contains_phrase(cap, phrase) for cap, phrase in items)
    return hits / len(items)


@dataclass(frozen=True)
class RankingJudgment:
    """Candidates ordered best-first with binary relevance per candidate."""

    candidates: tuple
    relevance: tuple

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(tuple(c) for c in self.candidates))
        object.__setattr__(self, "relevance", tuple(int(r) for r in self.relevance))
        if len(self.candidates) != len(self.relevance):
            raise ValueError("relevance length must match candidates")
        if any(r not in (0, 1) for r in self.relevance):
            raise ValueError("relevance must be binary")


def _padded_relevance(judgment: RankingJudgment, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = list(judgment.relevance)
    if len(rel) < k:
        warnings.warn(f"only {len(rel)} candidates for k={k}; padding with zeros", RuntimeWarning)
        rel += [0] * (k - len(rel))
    return rel


def precision_at_k(judgment: RankingJudgment, k: int) -> float:
    rel = _padded_relevance(judgment, k)
    return sum(rel[:k]) / k


def ndcg_at_k(judgment: RankingJudgment, k: int) -> float:
    rel = _padded_relevance(judgment, k)
    dcg = sum(r / math.log2(i + 2) for i, r in enumerate(rel[:k]))
    n_pos = sum(rel)
    if n_pos == 0:
        return 0.0
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, n_pos)))
    return dcg / idcg


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypothesis, references) -> float:
    """Sentence BLEU-4: uniform weights, clipped counts, brevity penalty,
    epsilon in place of zero n-gram matches."""
    hyp = list(hypothesis)
    refs = [list(r) for r in references]
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("empty reference")
    if not hyp:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        hyp_ngrams = _ngrams(hyp, n)
        total = sum(hyp_ngrams.values())
        if total == 0:
            log_sum += math.log(BLEU_EPSILON)
            continue
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in hyp_ngrams.items())
        log_sum += math.log(clipped / total) if clipped else math.log(BLEU_EPSILON)

    c = len(hyp)
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / 4.0)


def _lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference) -> float:
    """ROUGE-L F-measure (beta=1) via longest common subsequence."""
    hyp, ref = list(hypothesis), list(reference)
    if not ref:
        raise ValueError("empty reference")
    if not hyp:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2.0 * p * r / (p + r)


def biased_error_rate(predictions, references, category_words_a, category_words_b):
    """Class confusion rate: among samples whose reference uses a class-B
    word, the fraction whose prediction uses a class-A word.

    Returns (rate, error_count). Word membership is token-id level.
    """
    predictions = [list(p) for p in predictions]
    references = [list(r) for r in references]
    if len(predictions) != len(references):
        raise ValueError("predictions and references must align")
    wa, wb = set(category_words_a), set(category_words_b)
    total = errors = 0
    for pred, ref in zip(predictions, references):
        if not wb & set(ref):
            continue
        total += 1
        if wa & set(pred):
            errors += 1
    if total == 0:
        raise ValueError("no class-B references in the evaluation set")
    return errors / total, errors


def format_error_rate(rate: float, count: int) -> str:
    """Render as in the error-rate table, e.g. '13.91% (283)'."""
    return f"{100.0 * rate:.2f}% ({count})"
