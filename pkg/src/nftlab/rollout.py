"""Data collection: group sampling, verification, filtering and mini-batching."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from . import rng as rngmod
from .errors import ContractError, DegeneratePartition
from .policy import FrozenSnapshot
from .taskenv import answer_rewards, enumerate_answers, verify_rows


@dataclass
class RolloutGroup:
    """K answers to one question with their rewards and rollout-time log-likelihoods."""

    q: int
    answers: np.ndarray  # (K, L) int
    rewards: np.ndarray  # (K,) int in {0, 1}
    r_hat: float
    old_token_logprobs: np.ndarray  # (K, L)
    # Per-answer loss weights; ones for sampled groups, exact probabilities
    # for the enumerated pseudo-groups used in exact-expectation training.
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.answers))

    @property
    def K(self) -> int:
        return len(self.answers)


def _group(snapshot: FrozenSnapshot, q: int, answers: np.ndarray) -> RolloutGroup:
    task = snapshot.policy.task
    rows = np.full(len(answers), task.row(q))
    rewards = verify_rows(task, rows, answers)
    old = snapshot.policy.token_logprobs(rows, answers)
    return RolloutGroup(q, answers, rewards, float(rewards.sum() / len(rewards)), old)


def sample_slots(
    snapshot: FrozenSnapshot, questions: Sequence[int], slots: Sequence[int], seed: int, iteration: int
) -> np.ndarray:
    """Answers (len(questions), len(slots), L); slot k of question q uses its own stream."""
    policy = snapshot.policy
    task = policy.task
    L = task.answer_len
    rows = np.array([task.row(q) for q in questions], dtype=np.int64)
    u = np.empty((len(rows), len(slots), L))
    for i, row in enumerate(rows):
        for j, k in enumerate(slots):
            u[i, j] = rngmod.stream(seed, rngmod.ROLLOUT, iteration, int(row), int(k)).random(L)
    flat = policy.sample_rows(np.repeat(rows, len(slots)), u.reshape(-1, L))
    return flat.reshape(len(rows), len(slots), L)


def answer_stream(seed: int, iteration: int, task, q: int, slot: int) -> np.random.Generator:
    """The stream that :func:`collect_group` uses for ``(q, slot)``."""
    return rngmod.stream(seed, rngmod.ROLLOUT, iteration, task.row(q), slot)


def collect_groups(
    snapshot: FrozenSnapshot, questions: Sequence[int], K: int, seed: int, iteration: int = 0, first_slot: int = 0
) -> list[RolloutGroup]:
    if K < 2:
        raise ContractError(f"K must be >= 2, got {K}")
    answers = sample_slots(snapshot, questions, range(first_slot, first_slot + K), seed, iteration)
    return [_group(snapshot, q, answers[i]) for i, q in enumerate(questions)]


def collect_group(snapshot: FrozenSnapshot, q: int, K: int, seed: int, iteration: int = 0) -> RolloutGroup:
    """Sample K answers to ``q`` from the snapshot, verify them, cache old log-likelihoods."""
    return collect_groups(snapshot, [q], K, seed, iteration)[0]


def filter_groups(groups: Iterable[RolloutGroup]) -> list[RolloutGroup]:
    """Keep groups holding both a correct and an incorrect answer."""
    return [g for g in groups if 0.0 < g.r_hat < 1.0]


def collect_filtered(
    snapshot: FrozenSnapshot,
    questions: Sequence[int],
    K: int,
    seed: int,
    iteration: int = 0,
    refill: bool = False,
    max_rounds: int = 8,
) -> tuple[list[RolloutGroup], list[RolloutGroup]]:
    """Collect and filter; returns ``(all_groups, retained)``.

    With ``refill`` the questions whose group was discarded are resampled on
    fresh slots, up to ``max_rounds`` rounds, so that as many questions as
    possible contribute a retained group.
    """
    groups = collect_groups(snapshot, questions, K, seed, iteration)
    retained = filter_groups(groups)
    pending = [g.q for g in groups if not 0.0 < g.r_hat < 1.0]
    rounds = 1
    while refill and pending and rounds < max_rounds:
        extra = collect_groups(snapshot, pending, K, seed, iteration, first_slot=rounds * K)
        groups.extend(extra)
        kept = filter_groups(extra)
        retained.extend(kept)
        done = {g.q for g in kept}
        pending = [q for q in pending if q not in done]
        rounds += 1
    return groups, retained


def exact_groups(snapshot: FrozenSnapshot, questions: Sequence[int]) -> list[RolloutGroup]:
    """One pseudo-group per question holding every answer, weighted by its exact probability.

    ``r_hat`` is the exact correctness rate, so the group's weighted loss is the
    exact expectation of the per-answer loss under the snapshot.
    """
    policy = snapshot.policy
    task = policy.task
    grid = enumerate_answers(task)
    out = []
    for q in questions:
        rows = np.full(len(grid), task.row(q))
        old = policy.token_logprobs(rows, grid)
        probs = np.exp(old.sum(axis=1))
        rewards = answer_rewards(task, q)
        out.append(RolloutGroup(q, np.array(grid), rewards, float(probs @ rewards), old, probs))
    return out


@dataclass
class Batch:
    """Training units ``(group, answer)`` with a mini-batch partition.

    Every answer contributes all of its L tokens, so the token units of one
    answer never straddle mini-batches.
    """

    groups: list[RolloutGroup]
    refs: np.ndarray  # (M, 2): group index, answer index
    bounds: np.ndarray  # (num_minibatches + 1,)

    @property
    def num_minibatches(self) -> int:
        return len(self.bounds) - 1

    def __len__(self) -> int:
        return len(self.refs)

    def minibatch(self, i: int) -> Batch:
        lo, hi = int(self.bounds[i]), int(self.bounds[i + 1])
        return Batch(self.groups, self.refs[lo:hi], np.array([0, hi - lo]))

    def minibatches(self) -> Iterator[Batch]:
        for i in range(self.num_minibatches):
            yield self.minibatch(i)

    def units(self) -> Iterator[tuple[int, int, int]]:
        """All ``(group, answer, token)`` units in batch order."""
        for g, k in self.refs:
            for t in range(self.groups[g].answers.shape[1]):
                yield int(g), int(k), t


def build_batch(groups: Sequence[RolloutGroup], num_minibatches: int, rng: np.random.Generator) -> Batch:
    """Shuffle answers and split them into near-equal mini-batches."""
    if num_minibatches < 1:
        raise ContractError("num_minibatches must be >= 1")
    groups = list(groups)
    refs = np.array([(gi, k) for gi, g in enumerate(groups) for k in range(g.K)], dtype=np.int64).reshape(-1, 2)
    if len(refs) < num_minibatches:
        raise DegeneratePartition(f"{len(refs)} answers cannot fill {num_minibatches} mini-batches")
    refs = refs[rng.permutation(len(refs))]
    sizes = np.full(num_minibatches, len(refs) // num_minibatches)
    sizes[: len(refs) % num_minibatches] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return Batch(groups, refs, bounds)


def rollout_records(groups: Iterable[RolloutGroup], iteration: int) -> Iterator[dict]:
    for g in groups:
        for k in range(g.K):
            yield {
                "iter": iteration,
                "q": g.q,
                "k": k,
                "answer": g.answers[k].tolist(),
                "reward": int(g.rewards[k]),
                "r_hat": g.r_hat,
                "sum_old_logprob": float(g.old_token_logprobs[k].sum()),
            }


def write_rollouts(fh: IO[str], groups: Iterable[RolloutGroup], iteration: int) -> None:
    for rec in rollout_records(groups, iteration):
        fh.write(json.dumps(rec) + "\n")
