"""Outer training loop: snapshot, collect, filter, mini-batch updates, metrics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import IO

import numpy as np

from . import rng as rngmod
from .errors import ContractError
from .objectives import ObjectiveConfig, batch_loss_and_grad
from .oracle import mean_positive_kl
from .policy import TabularPolicy, save_checkpoint
from .rollout import build_batch, collect_filtered, exact_groups, filter_groups, write_rollouts
from .taskenv import TaskSpec, answer_rewards

log = logging.getLogger(__name__)

OPTIMIZERS = ("SGD", "ADAM")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
# Exact entropy / KL metrics every iteration only for answer spaces up to this size.
EXACT_METRICS_CAP = 10**4

PRESETS = {
    "llm-scale": {"learning_rate": 1e-6, "K": 16, "num_minibatches": 16, "optimizer": "ADAM"},
}


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-2
    iterations: int = 100
    questions_per_iter: int | None = None  # None: every question each iteration
    K: int = 16
    num_minibatches: int = 16
    optimizer: str = "SGD"
    warmup_steps: int = 0
    seed: int = 0
    exact_expectation: bool = False
    refill: bool = False
    oracle_stride: int = 10
    wall_clock_budget: float | None = None  # seconds

    def __post_init__(self):
        object.__setattr__(self, "optimizer", self.optimizer.upper())
        if not self.learning_rate >= 0:
            raise ContractError("learning_rate must be >= 0")
        if self.K < 2:
            raise ContractError("K must be >= 2")
        if self.num_minibatches < 1:
            raise ContractError("num_minibatches must be >= 1")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.warmup_steps < 0 or self.oracle_stride < 1:
            raise ContractError("warmup_steps must be >= 0 and oracle_stride >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> TrainerConfig:
        return cls(**{**PRESETS[name], **overrides})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_(self, **changes) -> TrainerConfig:
        return replace(self, **changes)


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def apply_update(
    policy: TabularPolicy, buf: np.ndarray, state: OptimizerState, lr: float, warmup_steps: int = 0
) -> None:
    """One descent step on the loss gradient ``buf``."""
    if buf.shape != policy.logits.shape:
        raise ContractError("gradient buffer does not match the policy")
    bad = np.argwhere(~np.isfinite(buf))
    if len(bad):
        idx = tuple(int(i) for i in bad[0])
        raise FloatingPointError(f"non-finite gradient at {idx}: {buf[idx]!r}")
    state.step += 1
    if warmup_steps > 0:
        lr = lr * min(1.0, state.step / warmup_steps)
    if state.kind == "SGD":
        policy.logits -= lr * buf
        return
    if state.m is None:
        state.m = np.zeros_like(buf)
        state.v = np.zeros_like(buf)
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * buf
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * buf * buf
    m_hat = state.m / (1 - ADAM_BETA1**state.step)
    v_hat = state.v / (1 - ADAM_BETA2**state.step)
    policy.logits -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class MetricsRecord:
    iteration: int
    train_accuracy: float | None
    retained_fraction: float | None
    mean_entropy: float | None
    mean_correct_rate: float | None
    loss: float
    grad_norm: float
    kl_to_positive: float | None
    steps: int
    skipped: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainerState:
    task: TaskSpec
    policy: TabularPolicy
    optimizer: OptimizerState
    iteration: int = 0
    rollout_sink: IO[str] | None = None
    # Loss gradient of the first (exactly on-policy) mini-batch of the last iteration.
    first_grad: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, task: TaskSpec, cfg: TrainerConfig, policy: TabularPolicy | None = None) -> TrainerState:
        policy = policy.copy() if policy is not None else TabularPolicy(task)
        return cls(task, policy, OptimizerState(cfg.optimizer))


def _exact_metrics(policy: TabularPolicy) -> tuple[float, float]:
    task = policy.task
    lp = policy.all_answer_logprobs()
    p = np.exp(lp)
    entropy = -(p * lp).sum(axis=1)
    rates = [p[i] @ answer_rewards(task, q) for i, q in enumerate(task.questions)]
    return float(entropy.mean()), float(np.mean(rates))


def _oracle_due(task: TaskSpec, cfg: TrainerConfig, iteration: int) -> bool:
    if task.answer_space_size > 10**6:
        return False
    return task.answer_space_size <= EXACT_METRICS_CAP or iteration % cfg.oracle_stride == 0


def initial_metrics(state: TrainerState, cfg: TrainerConfig) -> MetricsRecord:
    entropy = rate = None
    if _oracle_due(state.task, cfg, 0):
        entropy, rate = _exact_metrics(state.policy)
    return MetricsRecord(state.iteration, None, None, entropy, rate, 0.0, 0.0, None, 0, False)


def _questions(task: TaskSpec, cfg: TrainerConfig, iteration: int) -> list[int]:
    n = cfg.questions_per_iter
    if n is None or n >= task.num_questions:
        return list(task.questions)
    pick = rngmod.stream(cfg.seed, rngmod.QUESTIONS, iteration).choice(task.num_questions, n, replace=False)
    return [task.questions[i] for i in sorted(pick)]


def train_iteration(state: TrainerState, cfg: TrainerConfig, obj_cfg: ObjectiveConfig) -> MetricsRecord:
    """Run one rollout-then-update iteration and return its metrics."""
    state.iteration += 1
    it = state.iteration
    task = state.task
    snapshot = state.policy.freeze(it)
    questions = _questions(task, cfg, it)

    if cfg.exact_expectation:
        groups = exact_groups(snapshot, questions)
        retained = filter_groups(groups)
        accuracy = float(np.mean([g.r_hat for g in groups]))
    else:
        groups, retained = collect_filtered(snapshot, questions, cfg.K, cfg.seed, it, refill=cfg.refill)
        accuracy = float(np.mean([g.rewards.mean() for g in groups]))
        if state.rollout_sink is not None:
            write_rollouts(state.rollout_sink, groups, it)
    retained_fraction = len(retained) / len(groups)

    losses, norms = [], []
    state.first_grad = None
    if retained:
        n_answers = sum(g.K for g in retained)
        batch = build_batch(retained, min(cfg.num_minibatches, n_answers), rngmod.stream(cfg.seed, rngmod.BATCH, it))
        for mb in batch.minibatches():
            loss, grad, _ = batch_loss_and_grad(mb, state.policy, obj_cfg)
            if state.first_grad is None:
                state.first_grad = grad.copy()
            apply_update(state.policy, grad, state.optimizer, cfg.learning_rate, cfg.warmup_steps)
            losses.append(loss)
            norms.append(float(np.linalg.norm(grad)))
    else:
        log.warning("iteration %d: every group was filtered out; skipping update", it)

    entropy = rate = kl = None
    if _oracle_due(task, cfg, it):
        entropy, rate = _exact_metrics(state.policy)
        kl = mean_positive_kl(snapshot.policy, state.policy, [g.q for g in retained])
    return MetricsRecord(
        iteration=it,
        train_accuracy=accuracy,
        retained_fraction=retained_fraction,
        mean_entropy=entropy,
        mean_correct_rate=rate,
        loss=float(np.mean(losses)) if losses else 0.0,
        grad_norm=float(np.mean(norms)) if norms else 0.0,
        kl_to_positive=kl,
        steps=len(losses),
        skipped=not retained,
    )


@dataclass
class ExperimentResult:
    final: MetricsRecord
    records: list[MetricsRecord]
    policy: TabularPolicy
    wall_time: float
    stopped_early: bool = False


def run_experiment(
    cfg: TrainerConfig,
    obj_cfg: ObjectiveConfig,
    task: TaskSpec,
    metrics_sink: IO[str] | None = None,
    checkpoint_path=None,
    rollout_sink: IO[str] | None = None,
    init_policy: TabularPolicy | None = None,
) -> ExperimentResult:
    """Train for ``cfg.iterations`` iterations, streaming one metrics line per iteration."""
    start = time.monotonic()
    state = TrainerState.fresh(task, cfg, init_policy)
    state.rollout_sink = rollout_sink
    final = initial_metrics(state, cfg)
    records = []
    stopped = False
    for _ in range(cfg.iterations):
        if cfg.wall_clock_budget is not None and time.monotonic() - start > cfg.wall_clock_budget:
            log.warning("wall-clock budget of %.1fs exhausted after %d iterations", cfg.wall_clock_budget, state.iteration)
            stopped = True
            break
        final = train_iteration(state, cfg, obj_cfg)
        records.append(final)
        if metrics_sink is not None:
            try:
                metrics_sink.write(final.to_json() + "\n")
                metrics_sink.flush()
            except OSError as exc:
                raise OSError(f"iteration {final.iteration}: writing metrics failed: {exc}") from exc
    if checkpoint_path is not None:
        try:
            save_checkpoint(state.policy, checkpoint_path, state.iteration)
        except OSError as exc:
            raise OSError(f"iteration {state.iteration}: writing checkpoint failed: {exc}") from exc
    return ExperimentResult(final, records, state.policy, time.monotonic() - start, stopped)

