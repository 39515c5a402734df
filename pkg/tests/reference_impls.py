"""Independent straight-line re-implementations used as test oracles.

Everything here is deliberately written without touching the package's
internals: plain loops, plain arithmetic, no numpy vectorization, so a
bug in the engine cannot hide in a shared code path.
"""

from __future__ import annotations

import math

FORGERY_WORDS = {"fake", "forged", "forgery", "manipulated", "tampered"}
REAL_WORDS = {"real", "authentic", "genuine"}
NEGATION_WORDS = {"not", "no", "never", "neither", "nor", "without"}


def ref_tokenize(text: str) -> list[str]:
    tokens = []
    current = []
    for ch in text.lower():
        if ch.isalnum() or ch == "'":
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def ref_verdict(answer_text: str) -> str | None:
    """Token-by-token negation-window matcher: 'forgery', 'real', or None."""
    tokens = ref_tokenize(answer_text)
    forgery = real = False
    for i, token in enumerate(tokens):
        if token in FORGERY_WORDS or token in REAL_WORDS:
            negated = False
            for j in range(max(0, i - 3), i):
                if tokens[j] in NEGATION_WORDS or tokens[j].endswith("n't"):
                    negated = True
            if negated:
                continue
            if token in FORGERY_WORDS:
                forgery = True
            else:
                real = True
    if forgery and not real:
        return "forgery"
    if real and not forgery:
        return "real"
    return None


def ref_scan_regions(answer_text: str, names: list[str]) -> list[str]:
    """Naive scanner: first 'name:' occurrence per region, textual order."""
    lowered = answer_text.lower()
    hits = []
    for name in names:
        needle = name.lower() + ":"
        start = 0
        while True:
            pos = lowered.find(needle, start)
            if pos < 0:
                break
            before = lowered[pos - 1] if pos > 0 else " "
            if not (before.isalnum() or before == "'"):
                hits.append((pos, name))
                break
            start = pos + 1
    hits.sort()
    return [name for _, name in hits]


def ref_cosine(a: list[float], b: list[float]) -> float:
    dot = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(a, b):
        dot += x * y
        norm_a += x * x
        norm_b += y * y
    return dot / (math.sqrt(norm_a) * math.sqrt(norm_b))


def ref_alpha(index: int, group: list[list[float]]) -> float:
    total = 0.0
    for member in group:
        total += ref_cosine(group[index], member)
    return total / len(group)


def ref_see(
    rank: int,
    label_rank: int,
    group_size: int,
    cos_label: float,
    alpha: float,
    beta: float,
) -> float:
    alpha = max(0.0, min(1.0, alpha))
    base = beta * (group_size - rank) / group_size
    if base < 0.0:
        base = 0.0
    if rank < label_rank:
        return (base + math.exp(1.0 - cos_label)) * alpha
    return base * alpha


def ref_total(tag: float, key: float, acc: float, see: float) -> float:
    return tag + key + acc + see


def ref_normalize(rewards: list[float], epsilon: float = 1e-8) -> list[float]:
    m = len(rewards)
    mean = sum(rewards) / m
    variance = sum((r - mean) ** 2 for r in rewards) / (m - 1)
    std = math.sqrt(variance)
    if std < epsilon:
        return [0.0] * m
    return [(r - mean) / std for r in rewards]


def ref_auc(pos_scores: list[float], neg_scores: list[float]) -> float:
    """Brute-force Mann-Whitney pair counting, ties worth half."""
    wins = 0.0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos_scores) * len(neg_scores))


def _rates_at(
    threshold: float, pos_scores: list[float], neg_scores: list[float]
) -> tuple[float, float]:
    """(FPR, FNR) predicting forgery when score >= threshold."""
    false_pos = sum(1 for s in neg_scores if s >= threshold)
    false_neg = sum(1 for s in pos_scores if s < threshold)
    return false_pos / len(neg_scores), false_neg / len(pos_scores)


def ref_eer(
    pos_scores: list[float], neg_scores: list[float], sweep: int = 10_000
) -> float:
    """Dense threshold sweep, then bisection of the FPR-FNR sign change.

    The sweep locates adjacent grid thresholds where FPR-FNR crosses zero;
    bisection shrinks that bracket onto the jump, and the crossing value is
    linearly interpolated between the rates on either side of it.
    """
    lo = min(pos_scores + neg_scores) - 1.0
    hi = max(pos_scores + neg_scores) + 1.0
    prev_theta = lo
    prev_fpr, prev_fnr = _rates_at(lo, pos_scores, neg_scores)
    for j in range(1, sweep + 1):
        theta = lo + (hi - lo) * j / sweep
        fpr, fnr = _rates_at(theta, pos_scores, neg_scores)
        if prev_fpr - prev_fnr == 0.0:
            return prev_fpr
        if (prev_fpr - prev_fnr) > 0.0 >= (fpr - fnr):
            break
        prev_theta, prev_fpr, prev_fnr = theta, fpr, fnr
    else:
        raise AssertionError("sweep found no sign change")
    # bisect the bracket [prev_theta, theta] onto the jump
    a, b = prev_theta, theta
    for _ in range(200):
        mid = (a + b) / 2.0
        fpr_mid, fnr_mid = _rates_at(mid, pos_scores, neg_scores)
        if fpr_mid - fnr_mid > 0.0:
            a = mid
        else:
            b = mid
    fpr_a, fnr_a = _rates_at(a, pos_scores, neg_scores)
    fpr_b, fnr_b = _rates_at(b, pos_scores, neg_scores)
    gap_a = fpr_a - fnr_a
    gap_b = fpr_b - fnr_b
    if gap_b == 0.0:
        return fpr_b
    s = gap_a / (gap_a - gap_b)
    return fpr_a + s * (fpr_b - fpr_a)
