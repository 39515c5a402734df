"""Classification and caption metrics.

Scores are oriented so that higher means more likely forgery; the forgery
class is the positive class throughout. AUC uses the exact Mann-Whitney
pair-counting form (ties worth half), computed via tie-averaged ranks.
EER interpolates linearly between adjacent operating points of the
empirical ROC. CIDEr is the TF-IDF n-gram consensus metric (n = 1..4,
averaged, scaled by 10); the default "original" variant takes the cosine
between the candidate vector and the mean reference vector, while the "d"
variant averages per-reference similarities with clipped counts and a
length penalty.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .responses import Verdict

__all__ = [
    "ScoredPrediction",
    "LengthMismatchError",
    "EmptyError",
    "OneClassOnlyError",
    "EmptyReferenceError",
    "accuracy",
    "auc",
    "eer",
    "cider",
    "cider_scores",
    "verdict_to_score",
]


class LengthMismatchError(ValueError):
    """Paired sequences of different lengths."""


class EmptyError(ValueError):
    """No items to score."""


class OneClassOnlyError(ValueError):
    """Ranking metrics need at least one item of each class."""


class EmptyReferenceError(ValueError):
    """A candidate arrived with an empty reference set."""


@dataclass(frozen=True)
class ScoredPrediction:
    """One scored item: higher score means more likely forgery."""

    score: float
    label: Verdict

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


def verdict_to_score(verdict: Verdict | None) -> float:
    """Fallback score when a predictor exposes no confidence:
    forgery -> 1, real -> 0, unknown -> 0.5."""
    if verdict is Verdict.FORGERY:
        return 1.0
    if verdict is Verdict.REAL:
        return 0.0
    return 0.5


def accuracy(
    preds: Sequence[Verdict | None], labels: Sequence[Verdict]
) -> float:
    """Fraction of exact verdict matches; unknown counts as wrong."""
    if len(preds) != len(labels):
        raise LengthMismatchError(
            f"{len(preds)} predictions vs {len(labels)} labels"
        )
    if not labels:
        raise EmptyError("no items")
    return sum(p == l for p, l in zip(preds, labels)) / len(labels)


def _split_scores(items: Sequence[ScoredPrediction]) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([i.score for i in items if i.label is Verdict.FORGERY])
    neg = np.array([i.score for i in items if i.label is Verdict.REAL])
    if pos.size == 0 or neg.size == 0:
        raise OneClassOnlyError(
            f"need both classes: {pos.size} forgery, {neg.size} real"
        )
    return pos, neg


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(items: Sequence[ScoredPrediction]) -> float:
    """Probability a random forgery outscores a random real (ties half)."""
    pos, neg = _split_scores(items)
    scores = np.concatenate([pos, neg])
    ranks = _average_ranks(scores)
    rank_sum_pos = float(ranks[: pos.size].sum())
    u = rank_sum_pos - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


def _roc_points(
    pos: np.ndarray, neg: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, FNR) at each candidate threshold, in increasing threshold
    order, predicting forgery when score >= threshold. The final point is
    the predict-nothing extreme (FPR 0, FNR 1)."""
    thresholds = np.unique(np.concatenate([pos, neg]))
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    fpr = (neg.size - np.searchsorted(neg_sorted, thresholds, side="left")) / neg.size
    fnr = np.searchsorted(pos_sorted, thresholds, side="left") / pos.size
    fpr = np.append(fpr, 0.0)
    fnr = np.append(fnr, 1.0)
    return fpr, fnr


def eer(items: Sequence[ScoredPrediction]) -> float:
    """Rate where false-positive and false-negative rates cross on the
    empirical ROC, interpolating linearly between adjacent points."""
    pos, neg = _split_scores(items)
    fpr, fnr = _roc_points(pos, neg)
    gap = fpr - fnr
    # gap is non-increasing from +1 toward -1; find the sign change.
    for k in range(len(gap)):
        if gap[k] == 0.0:
            return float(fpr[k])
        if gap[k] > 0.0 >= gap[k + 1]:
            s = gap[k] / (gap[k] - gap[k + 1])
            return float(fpr[k] + s * (fpr[k + 1] - fpr[k]))
    raise AssertionError("ROC sweep found no FPR/FNR crossing")


_TOKEN_RE = re.compile(r"[a-z0-9']+")


def _ngram_counts(text: str, n: int) -> Counter:
    tokens = _TOKEN_RE.findall(text.lower())
    return Counter(
        tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)
    )


def _tf(counts: Counter) -> dict[tuple, float]:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {gram: count / total for gram, count in counts.items()}


def _vector_cosine(a: dict[tuple, float], b: dict[tuple, float]) -> float:
    dot = sum(weight * b.get(gram, 0.0) for gram, weight in a.items())
    norm_a = math.sqrt(sum(w * w for w in a.values()))
    norm_b = math.sqrt(sum(w * w for w in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return dot / (norm_a * norm_b)


def _document_frequencies(
    references: Sequence[Sequence[str]], n: int
) -> Counter:
    df: Counter = Counter()
    for refs in references:
        grams: set[tuple] = set()
        for ref in refs:
            grams.update(_ngram_counts(ref, n))
        df.update(grams)
    return df


def cider_scores(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    variant: str = "original",
    max_n: int = 4,
    sigma: float = 6.0,
) -> list[float]:
    """Per-item CIDEr scores over a fixed corpus.

    IDF is corpus-level: ``log(corpus_size / df)`` with ``df`` counted over
    reference sets and floored at 1, so a single-item corpus scores zero by
    construction. Items whose TF-IDF vectors vanish at some n-gram order
    contribute zero similarity at that order.
    """
    if variant not in ("original", "d"):
        raise ValueError(f"unknown CIDEr variant: {variant!r}")
    if len(candidates) != len(references):
        raise LengthMismatchError(
            f"{len(candidates)} candidates vs {len(references)} reference sets"
        )
    for refs in references:
        if len(refs) == 0:
            raise EmptyReferenceError("every item needs at least one reference")
    corpus_size = len(candidates)
    scores = [0.0] * corpus_size
    for n in range(1, max_n + 1):
        df = _document_frequencies(references, n)
        idf = {
            gram: math.log(corpus_size / max(count, 1))
            for gram, count in df.items()
        }

        def weighted(text: str) -> dict[tuple, float]:
            return {
                gram: tf * idf.get(gram, math.log(corpus_size))
                for gram, tf in _tf(_ngram_counts(text, n)).items()
            }

        for i, (candidate, refs) in enumerate(zip(candidates, references)):
            cand_vec = weighted(candidate)
            if variant == "original":
                mean_ref: dict[tuple, float] = {}
                for ref in refs:
                    for gram, weight in weighted(ref).items():
                        mean_ref[gram] = mean_ref.get(gram, 0.0) + weight / len(refs)
                similarity = _vector_cosine(cand_vec, mean_ref)
            else:
                cand_len = len(_TOKEN_RE.findall(candidate.lower()))
                cand_norm = math.sqrt(sum(w * w for w in cand_vec.values()))
                similarity = 0.0
                for ref in refs:
                    ref_vec = weighted(ref)
                    ref_norm = math.sqrt(sum(w * w for w in ref_vec.values()))
                    # clipped-count similarity over unclipped norms
                    dot = sum(
                        min(weight, ref_vec.get(gram, 0.0)) * ref_vec.get(gram, 0.0)
                        for gram, weight in cand_vec.items()
                    )
                    sim = (
                        dot / (cand_norm * ref_norm)
                        if cand_norm > 0.0 and ref_norm > 0.0
                        else 0.0
                    )
                    ref_len = len(_TOKEN_RE.findall(ref.lower()))
                    penalty = math.exp(
                        -((cand_len - ref_len) ** 2) / (2.0 * sigma**2)
                    )
                    similarity += penalty * sim
                similarity /= len(refs)
            scores[i] += 10.0 * similarity / max_n
    return scores


def cider(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    variant: str = "original",
) -> float:
    """Corpus mean of :func:`cider_scores`."""
    scores = cider_scores(candidates, references, variant)
    if not scores:
        raise EmptyError("no items")
    return sum(scores) / len(scores)
