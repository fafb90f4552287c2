"""Brute-force ground truth over enumerated answer spaces."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateQuestion
from .objectives import ObjectiveConfig, batch_loss_and_grad
from .policy import TabularPolicy
from .rollout import Batch, RolloutGroup, exact_groups
from .taskenv import TaskSpec, answer_rewards


@dataclass
class TargetDistribution:
    """Exact distribution over the enumerated answers of one question."""

    q: int
    probs: np.ndarray  # (V**L,) in enumeration order
    r_q: float


def _split(policy: TabularPolicy, task: TaskSpec, q: int):
    probs = np.exp(policy.answer_logprobs(q))
    correct = answer_rewards(task, q).astype(bool)
    r_q = float(probs[correct].sum())
    if not 0.0 < r_q < 1.0:
        raise DegenerateQuestion(f"question {q} has correctness rate {r_q}")
    return probs, correct, r_q


def bayes_positive(policy: TabularPolicy, task: TaskSpec, q: int) -> TargetDistribution:
    """The policy conditioned on a correct answer."""
    probs, correct, r_q = _split(policy, task, q)
    return TargetDistribution(q, np.where(correct, probs, 0.0) / r_q, r_q)


def bayes_negative(policy: TabularPolicy, task: TaskSpec, q: int) -> TargetDistribution:
    """The policy conditioned on an incorrect answer."""
    probs, correct, r_q = _split(policy, task, q)
    return TargetDistribution(q, np.where(correct, 0.0, probs) / (1.0 - r_q), r_q)


def split_identity_residual(policy: TabularPolicy, task: TaskSpec, q: int) -> float:
    """``max_a |r_q pi+(a) + (1 - r_q) pi-(a) - pi(a)|``."""
    pos = bayes_positive(policy, task, q)
    neg = bayes_negative(policy, task, q)
    probs = np.exp(policy.answer_logprobs(q))
    mix = pos.r_q * pos.probs + (1.0 - pos.r_q) * neg.probs
    return float(np.max(np.abs(mix - probs)))


def kl_divergence(p: TargetDistribution, policy: TabularPolicy, q: int | None = None) -> float:
    """``KL(p || policy(.|q))`` in nats, summed over the support of ``p``."""
    q = p.q if q is None else q
    lp = policy.answer_logprobs(q)
    support = p.probs > 0
    return float(p.probs[support] @ (np.log(p.probs[support]) - lp[support]))


def fd_gradient(loss: Callable[[TabularPolicy], float], policy: TabularPolicy, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss(policy)`` over every logit entry."""
    theta = policy.logits
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss(policy)
        flat[i] = orig - h
        minus = loss(policy)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def onpolicy_equivalence_report(
    batch: Batch, policy: TabularPolicy, cfg_pair: tuple[ObjectiveConfig, ObjectiveConfig], tol: float = 1e-12
) -> float:
    """``||grad_a - grad_b||_inf`` for two objectives on an on-policy batch (SUM normalisation)."""
    task = policy.task
    for g in batch.groups:
        rows = np.full(g.K, task.row(g.q))
        drift = np.max(np.abs(policy.token_logprobs(rows, g.answers) - g.old_token_logprobs))
        if drift > tol:
            raise ContractError(f"batch is off-policy (max log-ratio {drift:.3g})")
    a, b = (c.with_(loss_norm="SUM") for c in cfg_pair)
    _, grad_a, _ = batch_loss_and_grad(batch, policy, a)
    _, grad_b, _ = batch_loss_and_grad(batch, policy, b)
    return float(np.max(np.abs(grad_a - grad_b)))


@dataclass
class CheckRecord:
    check: str
    max_abs_diff: float
    threshold: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def check(name: str, value: float, threshold: float) -> CheckRecord:
    return CheckRecord(name, float(value), threshold, bool(value < threshold))


def full_batch(groups: Sequence[RolloutGroup]) -> Batch:
    """Every answer of every group in one mini-batch, in group order."""
    refs = np.array([(gi, k) for gi, g in enumerate(groups) for k in range(g.K)], dtype=np.int64).reshape(-1, 2)
    return Batch(list(groups), refs, np.array([0, len(refs)]))


def mean_positive_kl(snapshot_policy: TabularPolicy, policy: TabularPolicy, questions: Sequence[int]) -> float:
    """Mean over non-degenerate questions of ``KL(pi+_snapshot || policy)``."""
    task = policy.task
    kls = []
    for q in questions:
        try:
            target = bayes_positive(snapshot_policy, task, q)
        except DegenerateQuestion:
            continue
        kls.append(kl_divergence(target, policy, q))
    return float(np.mean(kls)) if kls else 0.0


@dataclass
class ConvergenceRun:
    kl: list[float]
    steps_to_target: int | None
    policy: TabularPolicy


def exact_expectation_fit(
    reference: TabularPolicy,
    cfg: ObjectiveConfig,
    steps: int,
    lr: float,
    target_kl: float = 1e-6,
    start: TabularPolicy | None = None,
    record_every: int = 1,
) -> ConvergenceRun:
    """Plain gradient descent on the exact expected loss with a frozen rollout policy.

    The loss weights every enumerated answer by its probability under
    ``reference`` and uses the exact correctness rate, so the run has no
    sampling noise.  ``kl`` tracks the mean ``KL(pi+ || pi_theta)``.
    """
    snapshot = reference.freeze()
    task = reference.task
    groups = [g for g in exact_groups(snapshot, task.questions) if 0.0 < g.r_hat < 1.0]
    questions = [g.q for g in groups]
    batch = full_batch(groups)
    policy = (start or reference).copy()
    kl = [mean_positive_kl(reference, policy, questions)]
    hit = 0 if kl[0] < target_kl else None
    for step in range(1, steps + 1):
        _, grad, _ = batch_loss_and_grad(batch, policy, cfg)
        policy.logits -= lr * grad
        if step % record_every == 0 or step == steps:
            kl.append(mean_positive_kl(reference, policy, questions))
            if hit is None and kl[-1] < target_kl:
                hit = step
    return ConvergenceRun(kl, hit, policy)
