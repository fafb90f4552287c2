"""Randomised oracle suites behind ``nftlab verify``.

Every suite returns a list of :class:`~nftlab.oracle.CheckRecord`; a suite
passes when all of its records pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import DegenerateQuestion
from .objectives import ObjectiveConfig, batch_loss, batch_loss_and_grad, implicit_negative_ratio, nft_clamp_offsets
from .oracle import (
    CheckRecord,
    check,
    exact_expectation_fit,
    fd_gradient,
    full_batch,
    onpolicy_equivalence_report,
    relative_error,
    split_identity_residual,
)
from .policy import TabularPolicy, random_policy
from .rollout import RolloutGroup, build_batch, collect_filtered
from .taskenv import RULES, enumerate_answers, make_task, verify_rows

IDENTITY_TOL = 1e-12
EQUIVALENCE_TOL = 1e-10
GRADCHECK_TOL = 1e-6
KL_TARGET = 1e-6
CLIP_MARGIN = 1e-3


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


def identities(seed: int = 0, n_tasks: int = 25) -> list[CheckRecord]:
    """Split-identity residual over random tasks (V <= 4, L <= 3) and Dirichlet policies."""
    rng = rngmod.stream(seed, rngmod.TEST, 1)
    worst, checked = 0.0, 0
    for _ in range(n_tasks):
        V, L = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        task = make_task(V, L, 3, RULES[int(rng.integers(len(RULES)))], seed=_seed(rng))
        policy = random_policy(task, rng)
        for q in task.questions:
            try:
                worst = max(worst, split_identity_residual(policy, task, q))
                checked += 1
            except DegenerateQuestion:
                continue
    return [check(f"identities/split_residual ({checked} questions)", worst, IDENTITY_TOL)]


def _random_onpolicy_batch(rng: np.random.Generator):
    while True:
        V, L = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        task = make_task(V, L, 4, "modsum", seed=_seed(rng))
        policy = random_policy(task, rng)
        _, retained = collect_filtered(policy.freeze(), task.questions, 8, _seed(rng))
        if not retained:
            continue
        batch = build_batch(retained, int(rng.integers(1, 5)), rng)
        return batch.minibatch(int(rng.integers(batch.num_minibatches))), policy


def equivalence(seed: int = 0, n_batches: int = 50) -> list[CheckRecord]:
    """On-policy gradient equality of NFT with GRPO and with Dr. GRPO."""
    rng = rngmod.stream(seed, rngmod.TEST, 2)
    pairs = {
        "NFT(sqrt_ratio)~GRPO": (ObjectiveConfig(kind="NFT", omega_kind="SQRT_RATIO"), ObjectiveConfig(kind="GRPO")),
        "NFT(one_minus_r)~DRGRPO": (ObjectiveConfig(kind="NFT", omega_kind="ONE_MINUS_R"), ObjectiveConfig(kind="DRGRPO")),
    }
    worst = dict.fromkeys(pairs, 0.0)
    for _ in range(n_batches):
        mb, policy = _random_onpolicy_batch(rng)
        for name, pair in pairs.items():
            worst[name] = max(worst[name], onpolicy_equivalence_report(mb, policy, pair))
    return [check(f"equivalence/{name}", v, EQUIVALENCE_TOL) for name, v in worst.items()]


GRADCHECK_OBJECTIVES = {
    "NFT": ObjectiveConfig(kind="NFT"),
    "NFT(theory)": ObjectiveConfig(kind="NFT", theory_mode=True),
    "GRPO": ObjectiveConfig(kind="GRPO"),
    "DRGRPO": ObjectiveConfig(kind="DRGRPO"),
    "RFT": ObjectiveConfig(kind="RFT"),
    "PG(onpolicy)": ObjectiveConfig(kind="PG", pg_mode="onpolicy"),
    "PG(is)": ObjectiveConfig(kind="PG", pg_mode="is"),
    "INFONCA": ObjectiveConfig(kind="INFONCA"),
}


@dataclass
class OffPolicyPoint:
    policy: TabularPolicy
    groups: list[RolloutGroup]


def random_offpolicy_point(rng: np.random.Generator, K: int = 4) -> OffPolicyPoint:
    """A perturbed policy and groups with mixed rewards drawn from a Dirichlet snapshot."""
    V, L = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    task = make_task(V, L, 2, "modsum", seed=_seed(rng))
    snapshot = random_policy(task, rng, alpha=2.0)
    policy = snapshot.copy()
    policy.logits += rng.normal(0.0, 0.3, policy.logits.shape)
    grid = enumerate_answers(task)
    groups = []
    for q in task.questions:
        rewards = verify_rows(task, np.full(len(grid), task.row(q)), grid)
        good, bad = np.flatnonzero(rewards == 1), np.flatnonzero(rewards == 0)
        n_good = int(rng.integers(1, K))
        pick = np.concatenate([rng.choice(good, n_good), rng.choice(bad, K - n_good)])
        answers = grid[rng.permutation(pick)]
        rows = np.full(K, task.row(q))
        r = verify_rows(task, rows, answers)
        groups.append(RolloutGroup(q, answers, r, float(r.mean()), snapshot.token_logprobs(rows, answers)))
    return OffPolicyPoint(policy, groups)


def _clear_of_kinks(point: OffPolicyPoint, cfg: ObjectiveConfig, margin: float = CLIP_MARGIN) -> bool:
    task = point.policy.task
    for g in point.groups:
        rows = np.full(g.K, task.row(g.q))
        logR = point.policy.token_logprobs(rows, g.answers) - g.old_token_logprobs
        if cfg.kind in ("GRPO", "DRGRPO"):
            R = np.exp(logR)
            if np.any(np.abs(R - (1 + cfg.eps_clip_high)) < margin) or np.any(np.abs(R - (1 - cfg.eps_clip_low)) < margin):
                return False
        if cfg.kind == "NFT":
            R = np.exp(logR.sum(axis=1)) if cfg.theory_mode else np.exp(logR)
            if np.any(np.abs(implicit_negative_ratio(R, g.r_hat) - cfg.epsilon) < margin):
                return False
    return True


def gradient_error(point: OffPolicyPoint, cfg: ObjectiveConfig, h: float = 1e-5) -> float:
    """Relative error between the analytic gradient and central differences of the loss.

    The NFT floor passes gradients straight through, so its loss is
    differentiated with the clamp offset frozen at the evaluation point.
    """
    batch = full_batch(point.groups)
    offsets = nft_clamp_offsets(batch, point.policy, cfg) if cfg.kind == "NFT" else None
    _, analytic, _ = batch_loss_and_grad(batch, point.policy, cfg)
    probe = point.policy.copy()
    numeric = fd_gradient(lambda p: batch_loss(batch, p, cfg, offsets), probe, h)
    return relative_error(analytic, numeric)


def gradcheck(seed: int = 0, n_points: int = 20) -> list[CheckRecord]:
    rng = rngmod.stream(seed, rngmod.TEST, 3)
    out = []
    for name, cfg in GRADCHECK_OBJECTIVES.items():
        worst, done = 0.0, 0
        while done < n_points:
            point = random_offpolicy_point(rng)
            if not _clear_of_kinks(point, cfg):
                continue
            worst = max(worst, gradient_error(point, cfg))
            done += 1
        out.append(check(f"gradcheck/{name}", worst, GRADCHECK_TOL))
    return out


CONVERGENCE_LR = 1.0
CONVERGENCE_STEPS = 5000
NEGATIVE_ONLY = ObjectiveConfig(kind="NFT", theory_mode=True, negative_only=True, omega_kind="CONST", loss_norm="SUM")
FULL_NFT = ObjectiveConfig(kind="NFT", omega_kind="CONST", loss_norm="SUM")


@dataclass
class ConvergenceResult:
    negative_kl: list[float]
    full_kl: list[float]
    negative_steps: list[int | None]
    full_steps: list[int | None]


def convergence_runs(seed: int = 0, n_tasks: int = 5, steps: int = CONVERGENCE_STEPS, record_every: int = 10) -> ConvergenceResult:
    """Exact-expectation SGD from a Dirichlet policy towards its positive policy."""
    rng = rngmod.stream(seed, rngmod.TEST, 4)
    res = ConvergenceResult([], [], [], [])
    for _ in range(n_tasks):
        task = make_task(3, 3, 2, "modsum", seed=_seed(rng))
        reference = random_policy(task, rng)
        for cfg, kl, hit in ((NEGATIVE_ONLY, res.negative_kl, res.negative_steps), (FULL_NFT, res.full_kl, res.full_steps)):
            run = exact_expectation_fit(reference, cfg, steps, CONVERGENCE_LR, KL_TARGET, record_every=record_every)
            kl.append(run.kl[-1])
            hit.append(run.steps_to_target)
    return res


def theorem1(seed: int = 0, n_tasks: int = 5) -> list[CheckRecord]:
    res = convergence_runs(seed, n_tasks)
    never = float(CONVERGENCE_STEPS + 1)
    slower = max(
        (f if f is not None else never) - (n if n is not None else never)
        for n, f in zip(res.negative_steps, res.full_steps)
    )
    return [
        check("theorem1/negative_only_final_kl", max(res.negative_kl), KL_TARGET),
        check("theorem1/full_final_kl", max(res.full_kl), KL_TARGET),
        # Extra steps the full objective needs beyond the negative-only one; must not be positive.
        CheckRecord("theorem1/full_extra_steps", slower, 0.0, bool(slower <= 0 and max(res.full_kl) < KL_TARGET)),
    ]


SUITES = {
    "identities": identities,
    "equivalence": equivalence,
    "gradcheck": gradcheck,
    "theorem1": theorem1,
}


def run_suite(name: str, seed: int = 0) -> list[CheckRecord]:
    if name == "all":
        return [rec for fn in SUITES.values() for rec in fn(seed)]
    return SUITES[name](seed)
