"""Rule-based reward components for sampled responses.

A candidate response earns four non-negative components:

* ``tag``: 0.5 when the think/answer tag structure parses, else 0.
* ``key``: fraction of the region vocabulary present as "Name:" headers,
  so listing every region earns the full 1.0.
* ``acc``: 1.0 when the candidate's verdict matches the label, else 0.
* ``see``: rank-based self-evolution term. Candidates the teacher ranks
  above the reference answer earn ``(beta * (M - r) / M + e^(1 - c)) * alpha``
  where ``c`` is the candidate/reference embedding cosine; candidates
  below the reference earn only the ``beta * (M - r) / M`` baseline.
  ``alpha`` is the candidate's mean cosine to its whole sample group and
  damps the reward when the group is scattered.

The total is always evaluated as ``tag + key + acc + see`` in that order,
so tests can reproduce it bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .responses import (
    DEFAULT_REGIONS,
    ParseError,
    RegionKey,
    Verdict,
    extract_verdict,
    parse_response,
    region_header_spans,
)

__all__ = [
    "Embedding",
    "RewardBreakdown",
    "RankInfo",
    "ZeroVectorError",
    "DimensionMismatchError",
    "InvalidRankError",
    "DEFAULT_BETA",
    "tag_reward",
    "keyword_reward",
    "accuracy_reward",
    "cosine",
    "dispersion_coefficient",
    "self_evolution_reward",
    "total_reward",
]

DEFAULT_BETA = 1.5


class ZeroVectorError(ValueError):
    """A zero-norm vector reached a cosine computation."""


class DimensionMismatchError(ValueError):
    """Vectors of different dimensions were compared."""


class InvalidRankError(ValueError):
    """Rank arguments outside 1..M+1, or candidate tied with the label."""


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-length real vector representing a text."""

    values: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.values, dtype=np.float64)
        if array.ndim != 1 or array.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        object.__setattr__(self, "values", array)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def of(cls, values: Iterable[float]) -> "Embedding":
        return cls(np.asarray(list(values), dtype=np.float64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class RewardBreakdown:
    """The four reward components and their total."""

    tag: float
    key: float
    acc: float
    see: float
    total: float

    @classmethod
    def from_components(
        cls, tag: float, key: float, acc: float, see: float
    ) -> "RewardBreakdown":
        return cls(tag=tag, key=key, acc=acc, see=see, total=tag + key + acc + see)

    def to_json_dict(self) -> dict[str, float]:
        return {
            "tag": self.tag,
            "key": self.key,
            "acc": self.acc,
            "see": self.see,
            "total": self.total,
        }


@dataclass(frozen=True)
class RankInfo:
    """Position of one candidate in a teacher-ranked pool of ``group_size``
    candidates plus the reference answer (ranks run 1..group_size+1,
    rank 1 best)."""

    rank: int
    label_rank: int
    group_size: int


def tag_reward(raw: str) -> float:
    """0.5 when both tag pairs are present and well nested, else 0.0."""
    return 0.0 if isinstance(parse_response(raw), ParseError) else 0.5


def keyword_reward(
    raw: str, vocab: tuple[RegionKey, ...] = DEFAULT_REGIONS
) -> float:
    """Fraction of vocabulary regions appearing as headers anywhere in the
    response. Counts distinct regions, so repeats earn nothing extra."""
    present = {key for _, _, key in region_header_spans(raw, vocab)}
    return len(present) / len(vocab)


def accuracy_reward(candidate: Verdict | None, label: Verdict) -> float:
    """1.0 on verdict match; an unknown candidate verdict never matches."""
    if not isinstance(label, Verdict):
        raise ValueError("label must be a definite verdict")
    return 1.0 if candidate == label else 0.0


def cosine(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two embeddings, in [-1, 1]."""
    if a.dimension != b.dimension:
        raise DimensionMismatchError(
            f"dimensions differ: {a.dimension} vs {b.dimension}"
        )
    norm_a = float(np.linalg.norm(a.values))
    norm_b = float(np.linalg.norm(b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVectorError("cosine undefined for zero-norm vectors")
    value = float(np.dot(a.values, b.values)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))


def dispersion_coefficient(index: int, group: Sequence[Embedding]) -> float:
    """Mean cosine of ``group[index]`` against every group member,
    self included. Near 1 when the group agrees, lower when scattered."""
    if not group:
        raise ValueError("group must be non-empty")
    if not 0 <= index < len(group):
        raise IndexError(f"candidate index {index} outside group of {len(group)}")
    anchor = group[index]
    return sum(cosine(anchor, member) for member in group) / len(group)


def self_evolution_reward(
    rank: int,
    label_rank: int,
    group_size: int,
    cos_label: float,
    alpha: float,
    beta: float = DEFAULT_BETA,
) -> float:
    """Rank-based reward with a bonus for outranking the reference answer.

    ``alpha`` is clamped to [0, 1] (it acts as a step-size damper) and the
    baseline rank term is floored at zero so the bottom-of-pool rank M+1
    cannot turn the reward negative.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    upper = group_size + 1
    if not (1 <= rank <= upper) or not (1 <= label_rank <= upper):
        raise InvalidRankError(
            f"ranks must lie in 1..{upper}: rank={rank}, label_rank={label_rank}"
        )
    if rank == label_rank:
        raise InvalidRankError("candidate and label ranks must differ")
    alpha = max(0.0, min(1.0, alpha))
    base = max(0.0, beta * (group_size - rank) / group_size)
    if rank < label_rank:
        return (base + math.exp(1.0 - cos_label)) * alpha
    return base * alpha


def total_reward(
    raw: str,
    label: Verdict,
    rank_info: RankInfo | None = None,
    cos_label: float = 0.0,
    alpha: float = 1.0,
    beta: float = DEFAULT_BETA,
    vocab: tuple[RegionKey, ...] = DEFAULT_REGIONS,
) -> RewardBreakdown:
    """Score one raw response against the label.

    The candidate verdict comes from the parsed answer block when the
    response parses, and from the raw text otherwise, keeping the accuracy
    component independent of formatting. Without ``rank_info`` (candidate
    not ranked) the self-evolution component is zero.
    """
    parsed = parse_response(raw, vocab)
    if isinstance(parsed, ParseError):
        verdict = extract_verdict(raw)
    else:
        verdict = parsed.verdict
    tag = tag_reward(raw)
    key = keyword_reward(raw, vocab)
    acc = accuracy_reward(verdict, label)
    if rank_info is None:
        see = 0.0
    else:
        see = self_evolution_reward(
            rank_info.rank,
            rank_info.label_rank,
            rank_info.group_size,
            cos_label,
            alpha,
            beta,
        )
    return RewardBreakdown.from_components(tag, key, acc, see)
