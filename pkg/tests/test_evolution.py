from __future__ import annotations

import filecmp
import json
import math
import random

import pytest

from forge_evolve.clients import (
    ClientTransportError,
    CosineTeacher,
    HashingEmbedder,
    MalformedRankingError,
    ScriptedPolicy,
)
from forge_evolve.dataset import CotFaceRecord
from forge_evolve.evolution import (
    Candidate,
    ClientSet,
    EvolutionAborted,
    EvolutionConfig,
    GroupTooSmallError,
    InsufficientCandidatesError,
    filter_candidates,
    initial_state,
    normalize_advantages,
    rank_pool,
    run_evolution,
    run_evolution_round,
    write_trajectory,
)
from forge_evolve.responses import Verdict, parse_response
from forge_evolve.rewards import RewardBreakdown

from .conftest import TAGGED_FORGERY_ANSWER, all_region_answer
from .reference_impls import ref_normalize

JUNK = ["zz qq ww", "mm nn oo", "pp rr ss"]


def make_candidate(text: str, tag=0.0, key=0.0, acc=0.0) -> Candidate:
    return Candidate(
        text=text,
        parsed=parse_response(text),
        reward=RewardBreakdown.from_components(tag, key, acc, 0.0),
    )


class FixedPolicy:
    """Returns a scripted list, truncated to the requested count."""

    def __init__(self, texts: list[str]):
        self.texts = texts

    def sample(self, prompt, image_ref, extra_info_ref, previous_answer, n):
        assert n <= len(self.texts)
        return self.texts[:n]


class StagedPolicy:
    """Pool depends on the previous answer, so evolution can progress."""

    def __init__(self, stages: dict[str, list[str]]):
        self.stages = stages

    def sample(self, prompt, image_ref, extra_info_ref, previous_answer, n):
        texts = self.stages[previous_answer]
        assert n <= len(texts)
        return texts[:n]


class FlakyPolicy:
    """Delegates, then raises a transport error on the given call number."""

    def __init__(self, inner, fail_on_call: int):
        self.inner = inner
        self.fail_on_call = fail_on_call
        self.calls = 0

    def sample(self, *args, **kwargs):
        self.calls += 1
        if self.calls == self.fail_on_call:
            raise ClientTransportError("scripted mid-run failure")
        return self.inner.sample(*args, **kwargs)


class TestNormalizeAdvantages:
    def test_degenerate_group_is_all_zeros(self):
        assert normalize_advantages([2.0, 2.0, 2.0]) == [0.0, 0.0, 0.0]

    def test_hand_evaluated_group(self):
        got = normalize_advantages([0.0, 1.0, 2.0, 3.0])
        std = math.sqrt(5.0 / 3.0)  # sample std with M-1 denominator
        expected = [(x - 1.5) / std for x in [0.0, 1.0, 2.0, 3.0]]
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx([-1.1619, -0.3873, 0.3873, 1.1619], abs=1e-4)

    def test_mean_zero_std_one(self, rng: random.Random):
        for _ in range(200):
            size = rng.randint(2, 16)
            rewards = [rng.uniform(0, 5) for _ in range(size)]
            advantages = normalize_advantages(rewards)
            if all(a == 0.0 for a in advantages):
                continue
            mean = sum(advantages) / size
            std = math.sqrt(
                sum((a - mean) ** 2 for a in advantages) / (size - 1)
            )
            assert abs(mean) <= 1e-9
            assert abs(std - 1.0) <= 1e-9

    def test_matches_straight_line_reference(self, rng: random.Random):
        for _ in range(100):
            rewards = [rng.uniform(0, 5) for _ in range(rng.randint(2, 12))]
            assert normalize_advantages(rewards) == pytest.approx(
                ref_normalize(rewards), abs=1e-12
            )

    def test_permutation_equivariance(self, rng: random.Random):
        rewards = [rng.uniform(0, 5) for _ in range(8)]
        base = normalize_advantages(rewards)
        order = list(range(8))
        rng.shuffle(order)
        permuted = normalize_advantages([rewards[i] for i in order])
        assert permuted == pytest.approx([base[i] for i in order], abs=1e-12)

    def test_tiny_variance_guard(self):
        assert normalize_advantages([1.0, 1.0 + 1e-12]) == [0.0, 0.0]

    def test_group_too_small(self):
        with pytest.raises(GroupTooSmallError):
            normalize_advantages([1.0])


class TestFilterCandidates:
    def test_identity_when_pool_equals_keep(self):
        pool = [make_candidate(t, acc=i * 0.1) for i, t in enumerate("abcd")]
        assert filter_candidates(pool, 4) == pool

    def test_brute_force_case(self):
        # filter scores 2.5, 0.0, 1.5, 2.5 -> keep original indices 0 and 3
        pool = [
            make_candidate("a", tag=0.5, key=1.0, acc=1.0),
            make_candidate("b"),
            make_candidate("c", tag=0.5, acc=1.0),
            make_candidate("d", tag=0.5, key=1.0, acc=1.0),
        ]
        kept = filter_candidates(pool, 2)
        assert [c.text for c in kept] == ["a", "d"]

    def test_all_malformed_ties_break_by_index(self):
        pool = [make_candidate(t) for t in "wxyz"]
        kept = filter_candidates(pool, 2)
        assert [c.text for c in kept] == ["w", "x"]

    def test_kept_scores_dominate_excluded(self, rng: random.Random):
        for _ in range(50):
            pool = [
                make_candidate(
                    f"c{i}",
                    tag=rng.choice([0.0, 0.5]),
                    key=rng.randint(0, 8) / 8,
                    acc=rng.choice([0.0, 1.0]),
                )
                for i in range(rng.randint(2, 10))
            ]
            keep = rng.randint(1, len(pool))
            kept = filter_candidates(pool, keep)
            assert len(kept) == keep
            assert all(c in pool for c in kept)
            excluded = [c for c in pool if c not in kept]
            if excluded:
                score = lambda c: c.reward.tag + c.reward.key + c.reward.acc
                assert min(map(score, kept)) >= max(map(score, excluded))

    def test_custom_scorer_strategy(self):
        pool = [make_candidate("long text here"), make_candidate("s")]
        kept = filter_candidates(pool, 1, scorer=lambda c: len(c.text))
        assert kept[0].text == "long text here"

    def test_insufficient_candidates(self):
        with pytest.raises(InsufficientCandidatesError):
            filter_candidates([make_candidate("a")], 2)


class TestRankPool:
    def test_label_wins_ties_with_identical_candidate(self):
        label = "the chin looks pasted on"
        teacher = CosineTeacher(target=label)
        pool = [make_candidate(label)]
        ranks, label_rank = rank_pool(pool, label, teacher)
        assert label_rank == 1
        assert ranks == [2]

    def test_ranking_equals_descending_mock_scores(self):
        target = "warped nostril edges and waxy skin"
        teacher = CosineTeacher(target=target)
        texts = [
            "warped nostril edges and waxy skin tone",
            "completely unrelated gibberish",
            "warped nostril edges",
        ]
        pool = [make_candidate(t) for t in texts]
        label = "warped nostril edge"
        ranks, label_rank = rank_pool(pool, label, teacher)
        items = [label] + texts
        scores = [teacher.alignment_score(t) for t in items]
        expected_order = sorted(range(len(items)), key=lambda i: (-scores[i], i))
        expected_rank = {idx: pos + 1 for pos, idx in enumerate(expected_order)}
        assert label_rank == expected_rank[0]
        assert ranks == [expected_rank[i + 1] for i in range(len(texts))]

    def test_non_permutation_rejected(self):
        class BadTeacher:
            def rank(self, image_ref, items):
                return [0, 0, 1]

        with pytest.raises(MalformedRankingError):
            rank_pool([make_candidate("a"), make_candidate("b")], "l", BadTeacher())

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            rank_pool([], "label", CosineTeacher(target="x y"))


def clients_for(record: CotFaceRecord, pool: list[str], target: str | None = None, seed: int = 0) -> ClientSet:
    return ClientSet(
        policy=ScriptedPolicy(pool, seed=seed),
        teacher=CosineTeacher(target=target or record.answer, seed=seed),
        embedder=HashingEmbedder(seed=seed),
    )


class TestRunEvolutionRound:
    def test_label_in_pool_and_nothing_better_keeps_reference(self, sample_record):
        config = EvolutionConfig(candidates=4, keep=2)
        policy = FixedPolicy([sample_record.answer] + JUNK)
        teacher = CosineTeacher(target=sample_record.answer)
        state = initial_state(sample_record, seed=1)
        new_state = run_evolution_round(
            state, policy, teacher, HashingEmbedder(), config, sample_record
        )
        assert new_state.iteration == 2
        assert new_state.reference == sample_record.answer
        assert new_state.trajectory[-1].selected == sample_record.answer
        assert new_state.trajectory[-1].label_rank == 1

    def test_strictly_closer_candidate_becomes_reference(self, sample_record):
        target = all_region_answer()
        teacher = CosineTeacher(target=target)
        better = all_region_answer("Definitely fake overall.")
        # precondition, checked against the mock's own scores
        assert teacher.alignment_score(better) > teacher.alignment_score(
            sample_record.answer
        )
        config = EvolutionConfig(candidates=3, keep=2)
        policy = FixedPolicy([better] + JUNK[:2])
        state = initial_state(sample_record, seed=1)
        new_state = run_evolution_round(
            state, policy, teacher, HashingEmbedder(), config, sample_record
        )
        assert new_state.reference == better
        assert new_state.trajectory[-1].selected == better
        assert new_state.trajectory[-1].label_rank > 1

    def test_round_is_atomic_on_client_failure(self, sample_record):
        config = EvolutionConfig(candidates=2, keep=1)
        policy = FlakyPolicy(FixedPolicy([TAGGED_FORGERY_ANSWER, JUNK[0]]), fail_on_call=1)
        teacher = CosineTeacher(target=sample_record.answer)
        state = initial_state(sample_record, seed=1)
        with pytest.raises(ClientTransportError):
            run_evolution_round(
                state, policy, teacher, HashingEmbedder(), config, sample_record
            )
        assert state.iteration == 1 and state.trajectory == ()

    def test_candidate_fields_populated(self, sample_record):
        config = EvolutionConfig(candidates=4, keep=3)
        state = run_evolution_round(
            initial_state(sample_record, seed=2),
            FixedPolicy([sample_record.answer] + JUNK),
            CosineTeacher(target=sample_record.answer),
            HashingEmbedder(),
            config,
            sample_record,
        )
        assert len(state.pool) == 3
        ranks = sorted(c.rank for c in state.pool)
        label_rank = state.trajectory[-1].label_rank
        assert sorted(ranks + [label_rank]) == [1, 2, 3, 4]
        for candidate in state.pool:
            assert candidate.embedding is not None
            assert candidate.reward is not None
            assert candidate.advantage is not None


class TestRunEvolution:
    def test_single_iteration_single_entry(self, sample_record):
        config = EvolutionConfig(candidates=4, keep=2)
        trajectory = run_evolution(
            sample_record,
            1,
            clients_for(sample_record, [sample_record.answer] + JUNK),
            config,
            seed=7,
        )
        assert len(trajectory) == 1
        assert trajectory[0].t == 1

    def test_reference_cosine_monotone_over_staged_improvements(self, sample_record):
        target = all_region_answer()
        teacher = CosineTeacher(target=target)
        mid = all_region_answer("Probably fake overall, mild artifacts.")
        best = all_region_answer("Definitely fake.")
        scores = {
            text: teacher.alignment_score(text)
            for text in (sample_record.answer, mid, best)
        }
        assert scores[sample_record.answer] < scores[mid] < scores[best]
        stages = {
            sample_record.answer: [mid] + JUNK[:2],
            mid: [best] + JUNK[:2],
            best: [best] + JUNK[:2],  # stable once found
        }
        clients = ClientSet(
            policy=StagedPolicy(stages),
            teacher=teacher,
            embedder=HashingEmbedder(),
        )
        trajectory = run_evolution(
            sample_record, 5, clients, EvolutionConfig(candidates=3, keep=2), seed=3
        )
        assert len(trajectory) == 5
        reference_scores = [
            teacher.alignment_score(entry.reference) for entry in trajectory
        ]
        final_score = teacher.alignment_score(trajectory[-1].selected)
        series = reference_scores + [final_score]
        assert all(a <= b + 1e-12 for a, b in zip(series, series[1:]))
        assert trajectory[-1].selected == best

    def test_failing_policy_preserves_prefix(self, sample_record):
        inner = FixedPolicy([sample_record.answer] + JUNK)
        clients = ClientSet(
            policy=FlakyPolicy(inner, fail_on_call=3),
            teacher=CosineTeacher(target=sample_record.answer),
            embedder=HashingEmbedder(),
        )
        with pytest.raises(EvolutionAborted) as excinfo:
            run_evolution(
                sample_record, 5, clients, EvolutionConfig(candidates=4, keep=2), seed=1
            )
        assert excinfo.value.iteration == 3
        assert len(excinfo.value.trajectory) == 2
        assert isinstance(excinfo.value.__cause__, ClientTransportError)

    def test_deterministic_trajectory_files(self, sample_record, tmp_path):
        pool = [sample_record.answer, all_region_answer()] + JUNK
        config = EvolutionConfig(candidates=4, keep=3)
        paths = []
        for run_index in range(2):
            trajectory = run_evolution(
                sample_record,
                3,
                clients_for(sample_record, pool, seed=11),
                config,
                seed=11,
            )
            path = tmp_path / f"run{run_index}.jsonl"
            write_trajectory(path, trajectory)
            paths.append(path)
        assert filecmp.cmp(*paths, shallow=False)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_convergence_stops_early(self, sample_record):
        # identical candidates -> alpha_mean == 1.0 > threshold after round 1
        clients = clients_for(
            sample_record, [sample_record.answer] * 4, seed=5
        )
        trajectory = run_evolution(
            sample_record,
            5,
            clients,
            EvolutionConfig(candidates=4, keep=2, convergence_alpha=0.9),
            seed=5,
        )
        assert len(trajectory) == 1
        assert trajectory[0].alpha_mean == pytest.approx(1.0, abs=1e-9)

    def test_iterations_must_be_positive(self, sample_record):
        clients = clients_for(sample_record, [sample_record.answer])
        with pytest.raises(ValueError):
            run_evolution(sample_record, 0, clients, EvolutionConfig())


class TestTrajectorySchema:
    def test_round_record_json_layout(self, sample_record, tmp_path):
        trajectory = run_evolution(
            sample_record,
            1,
            clients_for(sample_record, [sample_record.answer] + JUNK, seed=2),
            EvolutionConfig(candidates=4, keep=2),
            seed=2,
        )
        path = tmp_path / "t.jsonl"
        write_trajectory(path, trajectory)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 1
        doc = json.loads(lines[0])
        assert set(doc) == {
            "t",
            "reference",
            "selected",
            "candidates",
            "label_rank",
            "alpha_mean",
            "seed",
        }
        assert doc["t"] == 1 and doc["seed"] == 2
        assert doc["reference"] == sample_record.answer
        for candidate in doc["candidates"]:
            assert set(candidate) == {"text", "reward", "rank", "advantage"}
            assert set(candidate["reward"]) == {"tag", "key", "acc", "see", "total"}


class TestEvolutionConfig:
    def test_keep_cannot_exceed_candidates(self):
        with pytest.raises(ValueError):
            EvolutionConfig(candidates=2, keep=3)

    def test_keep_must_be_positive(self):
        with pytest.raises(ValueError):
            EvolutionConfig(candidates=2, keep=0)

    def test_beta_must_be_positive(self):
        with pytest.raises(ValueError):
            EvolutionConfig(beta=0.0)

    def test_initial_state_contract(self, sample_record):
        state = initial_state(sample_record, seed=42)
        assert state.iteration == 1
        assert state.reference == sample_record.answer
        assert state.trajectory == ()
        assert state.rng_seed == 42
