import json

import numpy as np
import pytest

from nftlab import rng as rngmod
from nftlab.errors import ContractError, DegeneratePartition
from nftlab.policy import TabularPolicy, point_mass_policy, random_policy
from nftlab.rollout import (
    RolloutGroup,
    build_batch,
    collect_filtered,
    collect_group,
    collect_groups,
    exact_groups,
    filter_groups,
    write_rollouts,
)
from nftlab.taskenv import correctness_rate_exact, make_task, verify


def fake_group(r_hat, K=4, q=0):
    n = int(round(r_hat * K))
    rewards = np.array([1] * n + [0] * (K - n))
    return RolloutGroup(q, np.zeros((K, 2), dtype=int), rewards, r_hat, np.zeros((K, 2)))


class TestCollect:
    def test_point_mass_on_correct(self):
        task = make_task(4, 3, 1, "modsum", [2])
        snap = point_mass_policy(task, {0: [1, 1, 0]}).freeze()
        g = collect_group(snap, 0, 8, seed=0)
        assert g.r_hat == 1.0
        assert (g.answers == [1, 1, 0]).all()

    def test_uniform_rate(self):
        task = make_task(2, 2, 1, "modsum", [1])
        g = collect_group(TabularPolicy(task).freeze(), 0, 10_000, seed=3)
        assert abs(g.r_hat - 0.5) < 0.02

    def test_rewards_are_verifier_outputs(self):
        task = make_task(3, 3, 4, "prefix", [1], seed=2)
        snap = random_policy(task, np.random.default_rng(0)).freeze()
        for g in collect_groups(snap, task.questions, 16, seed=1):
            assert [verify(task, g.q, a) for a in g.answers] == g.rewards.tolist()
            assert g.r_hat == g.rewards.mean()

    def test_old_logprobs_cached_from_snapshot(self):
        task = make_task(3, 2, 2, seed=0)
        policy = random_policy(task, np.random.default_rng(1))
        reference = policy.copy()
        g = collect_group(policy.freeze(), 1, 6, seed=0)
        policy.logits += np.random.default_rng(2).normal(size=policy.logits.shape)
        want = [[reference.token_logprob(1, a[:t], int(a[t])) for t in range(2)] for a in g.answers]
        np.testing.assert_allclose(g.old_token_logprobs, want, atol=1e-14)

    def test_K_below_two(self):
        task = make_task(3, 2, 1)
        with pytest.raises(ContractError):
            collect_group(TabularPolicy(task).freeze(), 0, 1, seed=0)

    def test_streams_are_per_slot(self):
        # Slot k draws the same answer whether K=4 or K=8.
        task = make_task(4, 3, 3, seed=0)
        snap = random_policy(task, np.random.default_rng(0)).freeze()
        small = collect_groups(snap, task.questions, 4, seed=9, iteration=2)
        big = collect_groups(snap, task.questions, 8, seed=9, iteration=2)
        for a, b in zip(small, big):
            np.testing.assert_array_equal(a.answers, b.answers[:4])

    def test_question_subset_does_not_shift_streams(self):
        task = make_task(4, 3, 3, seed=0)
        snap = random_policy(task, np.random.default_rng(0)).freeze()
        full = collect_groups(snap, task.questions, 4, seed=9)
        one = collect_groups(snap, [2], 4, seed=9)
        np.testing.assert_array_equal(full[2].answers, one[0].answers)

    def test_empirical_rate_matches_exact(self):
        task = make_task(3, 3, 1, "modsum", seed=1)
        policy = random_policy(task, np.random.default_rng(4))
        g = collect_group(policy.freeze(), 0, 20_000, seed=0)
        exact = correctness_rate_exact(task, 0, policy)
        assert abs(g.r_hat - exact) < 4 * np.sqrt(exact * (1 - exact) / 20_000)


class TestFilter:
    def test_keeps_mixed_groups(self):
        kept = filter_groups([fake_group(0.0), fake_group(0.25), fake_group(1.0)])
        assert [g.r_hat for g in kept] == [0.25]

    def test_empty(self):
        assert filter_groups([]) == []

    def test_identity_on_mixed(self):
        groups = [fake_group(0.5, q=i) for i in range(3)]
        assert filter_groups(groups) == groups

    def test_refill_uses_fresh_slots(self):
        task = make_task(4, 3, 6, seed=0)
        snap = TabularPolicy(task).freeze()
        plain_all, plain_kept = collect_filtered(snap, task.questions, 2, seed=0)
        all_, kept = collect_filtered(snap, task.questions, 2, seed=0, refill=True)
        assert len(kept) >= len(plain_kept)
        assert len(all_) >= len(plain_all)
        assert all(0 < g.r_hat < 1 for g in kept)


class TestBatch:
    def test_even_split(self):
        groups = [fake_group(0.5, K=16, q=i) for i in range(32)]
        batch = build_batch(groups, 16, np.random.default_rng(0))
        assert batch.num_minibatches == 16
        assert [len(mb) for mb in batch.minibatches()] == [32] * 16

    def test_single_part(self):
        groups = [fake_group(0.5, q=i) for i in range(3)]
        batch = build_batch(groups, 1, np.random.default_rng(0))
        assert len(batch.minibatch(0)) == 12

    def test_partition_is_a_permutation(self):
        groups = [fake_group(0.5, K=5, q=i) for i in range(3)]
        batch = build_batch(groups, 4, np.random.default_rng(0))
        refs = np.concatenate([mb.refs for mb in batch.minibatches()])
        assert sorted(map(tuple, refs)) == [(g, k) for g in range(3) for k in range(5)]
        assert sorted(len(mb) for mb in batch.minibatches()) == [3, 4, 4, 4]

    def test_deterministic(self):
        groups = [fake_group(0.5, q=i) for i in range(4)]
        a = build_batch(groups, 3, rngmod.stream(1, rngmod.BATCH, 5))
        b = build_batch(groups, 3, rngmod.stream(1, rngmod.BATCH, 5))
        np.testing.assert_array_equal(a.refs, b.refs)

    def test_tokens_stay_with_their_answer(self):
        groups = [fake_group(0.5, q=i) for i in range(2)]
        batch = build_batch(groups, 2, np.random.default_rng(0))
        units = list(batch.minibatch(0).units())
        assert len(units) == 2 * len(batch.minibatch(0))

    def test_too_many_minibatches(self):
        with pytest.raises(DegeneratePartition):
            build_batch([fake_group(0.5)], 5, np.random.default_rng(0))

    def test_empty(self):
        with pytest.raises(DegeneratePartition):
            build_batch([], 1, np.random.default_rng(0))


class TestExactGroups:
    def test_weights_and_rate(self):
        task = make_task(3, 2, 2, seed=0)
        policy = random_policy(task, np.random.default_rng(0))
        for g in exact_groups(policy.freeze(), task.questions):
            assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert g.r_hat == pytest.approx(correctness_rate_exact(task, g.q, policy), abs=1e-14)


def test_rollout_dump_format(tmp_path):
    task = make_task(3, 2, 2, seed=0)
    groups = collect_groups(TabularPolicy(task).freeze(), task.questions, 3, seed=0, iteration=4)
    path = tmp_path / "r.jsonl"
    with open(path, "w") as fh:
        write_rollouts(fh, groups, 4)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == 6
    assert set(recs[0]) == {"iter", "q", "k", "answer", "reward", "r_hat", "sum_old_logprob"}
    assert recs[0]["sum_old_logprob"] == pytest.approx(2 * np.log(1 / 3))
