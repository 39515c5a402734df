"""Group-relative candidate scoring and the self-evolution loop.

Each round samples C candidate responses from the policy, keeps the top M
by a label-free quality filter, embeds and teacher-ranks them together
with the current reference answer, scores every survivor with the full
reward, and normalizes the rewards within the group into advantages
(subtract mean, divide by sample standard deviation). The teacher's
top-ranked item becomes the round's selection; when a candidate outranks
the reference, it replaces the reference for the next round, so the
reference never regresses under the teacher's ordering.

Rounds are atomic: any client failure propagates before the caller's
state is touched, and the multi-round driver reports the failing
iteration together with the completed prefix of the trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .clients import (
    ClientError,
    EmbedderClient,
    PolicyClient,
    TeacherClient,
    check_permutation,
)
from .dataset import CotFaceRecord
from .responses import (
    DEFAULT_REGIONS,
    CotResponse,
    ParseError,
    RegionKey,
    parse_response,
)
from .rewards import (
    DEFAULT_BETA,
    Embedding,
    RankInfo,
    RewardBreakdown,
    cosine,
    total_reward,
)

__all__ = [
    "Candidate",
    "EvolutionState",
    "EvolutionConfig",
    "ClientSet",
    "RoundRecord",
    "CandidateRecord",
    "GroupTooSmallError",
    "InsufficientCandidatesError",
    "EvolutionAborted",
    "ADVANTAGE_EPSILON",
    "normalize_advantages",
    "filter_candidates",
    "rank_pool",
    "run_evolution_round",
    "run_evolution",
    "initial_state",
    "write_trajectory",
]

ADVANTAGE_EPSILON = 1e-8


class GroupTooSmallError(ValueError):
    """Advantage normalization needs at least two rewards."""


class InsufficientCandidatesError(ValueError):
    """Fewer candidates than the filter was asked to keep."""


class EvolutionAborted(Exception):
    """A round failed; carries the iteration and the completed prefix."""

    def __init__(self, iteration: int, trajectory: list["RoundRecord"], cause: Exception):
        super().__init__(f"evolution aborted at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.trajectory = trajectory


@dataclass
class Candidate:
    """One sampled response and everything computed about it."""

    text: str
    parsed: CotResponse | ParseError
    embedding: Embedding | None = None
    reward: RewardBreakdown | None = None
    rank: int | None = None
    advantage: float | None = None


@dataclass(frozen=True)
class EvolutionState:
    """State between rounds; never mutated, each round returns a new one."""

    iteration: int
    reference: str
    pool: tuple[Candidate, ...]
    trajectory: tuple["RoundRecord", ...]
    rng_seed: int


@dataclass(frozen=True)
class EvolutionConfig:
    candidates: int = 8
    keep: int = 4
    beta: float = DEFAULT_BETA
    vocab: tuple[RegionKey, ...] = DEFAULT_REGIONS
    epsilon: float = ADVANTAGE_EPSILON
    convergence_alpha: float | None = None
    extra_info_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.candidates >= self.keep >= 1:
            raise ValueError(
                f"need candidates >= keep >= 1, got "
                f"candidates={self.candidates}, keep={self.keep}"
            )
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class ClientSet:
    policy: PolicyClient
    teacher: TeacherClient
    embedder: EmbedderClient


@dataclass(frozen=True)
class CandidateRecord:
    text: str
    reward: RewardBreakdown
    rank: int
    advantage: float


@dataclass(frozen=True)
class RoundRecord:
    """One trajectory entry, serialized as a JSON Lines record."""

    t: int
    reference: str
    selected: str
    candidates: tuple[CandidateRecord, ...]
    label_rank: int
    alpha_mean: float
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "reference": self.reference,
            "selected": self.selected,
            "candidates": [
                {
                    "text": c.text,
                    "reward": c.reward.to_json_dict(),
                    "rank": c.rank,
                    "advantage": c.advantage,
                }
                for c in self.candidates
            ],
            "label_rank": self.label_rank,
            "alpha_mean": self.alpha_mean,
            "seed": self.seed,
        }


def normalize_advantages(
    rewards: Sequence[float], epsilon: float = ADVANTAGE_EPSILON
) -> list[float]:
    """Standardize rewards within a group: subtract the mean, divide by the
    sample (M-1 denominator) standard deviation. Groups with standard
    deviation below ``epsilon`` come back as all zeros."""
    if len(rewards) < 2:
        raise GroupTooSmallError(f"need at least 2 rewards, got {len(rewards)}")
    values = np.asarray(rewards, dtype=np.float64)
    std = float(values.std(ddof=1))
    if std < epsilon:
        return [0.0] * len(rewards)
    mean = float(values.mean())
    return [float(v) for v in (values - mean) / std]


def default_filter_score(candidate: Candidate) -> float:
    """Label-free-and-rank-free quality: tag + keyword + accuracy parts."""
    if candidate.reward is None:
        raise ValueError("candidate has no reward breakdown to score")
    return candidate.reward.tag + candidate.reward.key + candidate.reward.acc


def filter_candidates(
    pool: Sequence[Candidate],
    keep: int,
    scorer: Callable[[Candidate], float] = default_filter_score,
) -> list[Candidate]:
    """Keep the ``keep`` best-scoring candidates, original order preserved;
    ties go to the earlier sample."""
    if keep < 1:
        raise ValueError("keep must be >= 1")
    if len(pool) < keep:
        raise InsufficientCandidatesError(
            f"pool of {len(pool)} cannot fill keep={keep}"
        )
    scored = sorted(range(len(pool)), key=lambda i: (-scorer(pool[i]), i))
    kept = sorted(scored[:keep])
    return [pool[i] for i in kept]


def rank_pool(
    pool: Sequence[Candidate],
    label_text: str,
    teacher: TeacherClient,
    image_ref: str = "",
) -> tuple[list[int], int]:
    """Teacher-rank the pool with the reference answer included.

    The reference goes first in the item list, so teachers that break ties
    by input order (as the bundled cosine mock does) place it above any
    candidate it ties with. Returns 1-based ranks for the pool and the
    reference's rank.
    """
    if not pool:
        raise ValueError("pool must be non-empty")
    items = [label_text] + [candidate.text for candidate in pool]
    order = teacher.rank(image_ref, items)
    order = check_permutation(order, len(items))
    position = {item_index: rank for rank, item_index in enumerate(order, start=1)}
    return [position[i + 1] for i in range(len(pool))], position[0]


def _extra_info_ref(record: CotFaceRecord, config: EvolutionConfig) -> str:
    if config.extra_info_dir is None:
        return ""
    stem = Path(record.image_path).name.rsplit(".", 1)[0]
    return str(Path(config.extra_info_dir) / f"{stem}.fvce")


def run_evolution_round(
    state: EvolutionState,
    policy: PolicyClient,
    teacher: TeacherClient,
    embedder: EmbedderClient,
    config: EvolutionConfig,
    record: CotFaceRecord,
) -> EvolutionState:
    """Execute one sample-filter-rank-score round and advance the state."""
    texts = policy.sample(
        prompt=record.question,
        image_ref=record.image_path,
        extra_info_ref=_extra_info_ref(record, config),
        previous_answer=state.reference,
        n=config.candidates,
    )
    pool = [
        Candidate(
            text=text,
            parsed=parse_response(text, config.vocab),
            reward=total_reward(text, record.label, vocab=config.vocab),
        )
        for text in texts
    ]
    kept = filter_candidates(pool, config.keep)

    embeddings = embedder.embed([state.reference] + [c.text for c in kept])
    reference_embedding = embeddings[0]
    group = embeddings[1:]
    for candidate, embedding in zip(kept, group):
        candidate.embedding = embedding

    ranks, label_rank = rank_pool(
        kept, state.reference, teacher, image_ref=record.image_path
    )

    alphas = []
    for i, candidate in enumerate(kept):
        alpha = sum(cosine(group[i], other) for other in group) / len(group)
        alphas.append(alpha)
        candidate.rank = ranks[i]
        candidate.reward = total_reward(
            candidate.text,
            record.label,
            rank_info=RankInfo(ranks[i], label_rank, len(kept)),
            cos_label=cosine(group[i], reference_embedding),
            alpha=alpha,
            beta=config.beta,
            vocab=config.vocab,
        )
    if len(kept) == 1:
        advantages = [0.0]  # single-candidate group is degenerate by definition
    else:
        advantages = normalize_advantages(
            [c.reward.total for c in kept], epsilon=config.epsilon
        )
    for candidate, advantage in zip(kept, advantages):
        candidate.advantage = advantage

    if label_rank == 1:
        selected = state.reference
        next_reference = state.reference
    else:
        selected = kept[ranks.index(1)].text
        next_reference = selected

    round_record = RoundRecord(
        t=state.iteration,
        reference=state.reference,
        selected=selected,
        candidates=tuple(
            CandidateRecord(
                text=c.text,
                reward=c.reward,
                rank=c.rank,
                advantage=c.advantage,
            )
            for c in kept
        ),
        label_rank=label_rank,
        alpha_mean=sum(alphas) / len(alphas),
        seed=state.rng_seed,
    )
    return EvolutionState(
        iteration=state.iteration + 1,
        reference=next_reference,
        pool=tuple(kept),
        trajectory=state.trajectory + (round_record,),
        rng_seed=state.rng_seed,
    )


def initial_state(record: CotFaceRecord, seed: int = 0) -> EvolutionState:
    """Iteration 1 state: the reference answer is the dataset label text."""
    return EvolutionState(
        iteration=1,
        reference=record.answer,
        pool=(),
        trajectory=(),
        rng_seed=seed,
    )


def run_evolution(
    record: CotFaceRecord,
    iterations: int,
    clients: ClientSet,
    config: EvolutionConfig,
    seed: int = 0,
) -> list[RoundRecord]:
    """Run up to ``iterations`` rounds for one dataset record.

    Stops early when the pool's mean dispersion coefficient exceeds
    ``config.convergence_alpha`` (disabled by default). Client failures
    raise :class:`EvolutionAborted` carrying the failing iteration and the
    rounds completed so far.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = initial_state(record, seed)
    for _ in range(iterations):
        try:
            state = run_evolution_round(
                state, clients.policy, clients.teacher, clients.embedder, config, record
            )
        except ClientError as exc:
            raise EvolutionAborted(
                state.iteration, list(state.trajectory), exc
            ) from exc
        latest = state.trajectory[-1]
        if (
            config.convergence_alpha is not None
            and latest.alpha_mean > config.convergence_alpha
        ):
            break
    return list(state.trajectory)


def write_trajectory(path: str | Path, trajectory: Sequence[RoundRecord]) -> None:
    """One JSON record per round, newline-delimited."""
    with open(path, "w", encoding="utf-8") as handle:
        for round_record in trajectory:
            handle.write(json.dumps(round_record.to_json_dict(), ensure_ascii=False))
            handle.write("\n")
