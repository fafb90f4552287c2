"""Tabular autoregressive softmax policies.

Each question owns a trie of contexts: every prefix of length ``0..L-1``
gets its own row of ``V`` logits.  The prefix ``(a_1, ..., a_t)`` lives at
row ``offset[t] + sum_i a_i * V**(t-i)`` where ``offset[t] = sum_{s<t} V**s``,
so the full table has shape ``(N, C, V)`` with ``C = sum_{t<L} V**t``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ContractError
from .taskenv import TaskSpec, enumerate_answers

CHECKPOINT_VERSION = 1


class TabularPolicy:
    """Full-prefix tabular policy over a task's answer space."""

    def __init__(self, task: TaskSpec, logits: np.ndarray | None = None):
        V, L = task.vocab_size, task.answer_len
        self.task = task
        self.offsets = np.array([(V**t - 1) // (V - 1) for t in range(L + 1)], dtype=np.int64)
        shape = (task.num_questions, int(self.offsets[L]), V)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ContractError(f"logit table must have shape {shape}, got {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ContractError("logits must be finite")
        self.logits = logits
        # Place value of a_i when the prefix has length t is V**(t-1-i).
        self._powers = V ** np.arange(L, dtype=np.int64)

    @property
    def num_contexts(self) -> int:
        return self.logits.shape[1]

    def copy(self) -> TabularPolicy:
        return TabularPolicy(self.task, self.logits.copy())

    def freeze(self, iteration: int = 0) -> FrozenSnapshot:
        return FrozenSnapshot.of(self, iteration)

    # -- indexing ---------------------------------------------------------

    def context_index(self, prefix: Sequence[int]) -> int:
        t = len(prefix)
        V = self.task.vocab_size
        if t >= self.task.answer_len:
            raise ContractError(f"prefix length {t} must be < L={self.task.answer_len}")
        code = 0
        for tok in prefix:
            if not 0 <= tok < V:
                raise ContractError(f"prefix token {tok} outside vocabulary")
            code = code * V + int(tok)
        return int(self.offsets[t]) + code

    def context_indices(self, answers: np.ndarray) -> np.ndarray:
        """Row of the context that emits each token of ``answers`` (M, L)."""
        answers = np.asarray(answers, dtype=np.int64)
        M, L = answers.shape
        V = self.task.vocab_size
        ctx = np.empty((M, L), dtype=np.int64)
        code = np.zeros(M, dtype=np.int64)
        for t in range(L):
            ctx[:, t] = self.offsets[t] + code
            code = code * V + answers[:, t]
        return ctx

    def prefix_of(self, context: int) -> tuple[int, ...]:
        """Inverse of :meth:`context_index`."""
        t = int(np.searchsorted(self.offsets, context, side="right")) - 1
        code = context - int(self.offsets[t])
        V = self.task.vocab_size
        out = []
        for _ in range(t):
            code, tok = divmod(code, V)
            out.append(tok)
        return tuple(reversed(out))

    # -- probabilities ----------------------------------------------------

    def log_probs(self) -> np.ndarray:
        """Per-context log-softmax table, shape (N, C, V)."""
        return log_softmax(self.logits, axis=-1)

    def token_logprob(self, q: int, prefix: Sequence[int], token: int) -> float:
        if not 0 <= token < self.task.vocab_size:
            raise ContractError(f"token {token} outside vocabulary")
        row = self.logits[self.task.row(q), self.context_index(prefix)]
        return float(log_softmax(row)[token])

    def token_logprobs(self, rows: np.ndarray, answers: np.ndarray) -> np.ndarray:
        """Vectorised per-token log-probabilities for answers (M, L) of questions ``rows``."""
        answers = np.asarray(answers, dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64)
        ctx = self.context_indices(answers)
        sel = self.logits[rows[:, None], ctx]  # (M, L, V)
        return np.take_along_axis(log_softmax(sel, axis=-1), answers[..., None], axis=-1)[..., 0]

    def seq_logprob(self, q: int, a: Sequence[int]) -> float:
        a = np.asarray(a, dtype=np.int64)
        if a.shape != (self.task.answer_len,):
            raise ContractError(f"answer must have length {self.task.answer_len}")
        return float(sum(self.token_logprob(q, a[:t], int(a[t])) for t in range(len(a))))

    def answer_logprobs(self, q: int) -> np.ndarray:
        """Exact log-probability of every enumerated answer of ``q``."""
        grid = enumerate_answers(self.task)
        lp = log_softmax(self.logits[self.task.row(q)], axis=-1)
        ctx = self.context_indices(grid)
        return lp[ctx, grid].sum(axis=1)

    def all_answer_logprobs(self) -> np.ndarray:
        """Exact answer log-probabilities for every question, shape (N, V**L)."""
        grid = enumerate_answers(self.task)
        ctx = self.context_indices(grid)
        lp = self.log_probs()
        return lp[:, ctx, grid].sum(axis=2)

    def entropy_exact(self, q: int) -> float:
        lp = self.answer_logprobs(q)
        return float(-(np.exp(lp) @ lp))

    # -- sampling ---------------------------------------------------------

    def sample_rows(self, rows: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """Ancestral sampling driven by pre-drawn uniforms (M, L).

        Token t of answer m is the inverse-CDF draw of ``uniforms[m, t]`` under
        ``softmax(logits[rows[m], prefix])``.
        """
        rows = np.asarray(rows, dtype=np.int64)
        M, L = uniforms.shape
        V = self.task.vocab_size
        out = np.empty((M, L), dtype=np.int64)
        code = np.zeros(M, dtype=np.int64)
        for t in range(L):
            p = softmax(self.logits[rows, self.offsets[t] + code], axis=-1)
            cdf = np.cumsum(p, axis=-1)
            tok = (uniforms[:, t : t + 1] >= cdf[:, :-1]).sum(axis=1)
            out[:, t] = tok
            code = code * V + tok
        return out

    def sample_answer(self, q: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((1, self.task.answer_len))
        return self.sample_rows(np.array([self.task.row(q)]), u)[0]


@dataclass(frozen=True)
class FrozenSnapshot:
    """Read-only copy of a policy taken at a given iteration."""

    policy: TabularPolicy
    iteration: int

    @classmethod
    def of(cls, policy: TabularPolicy, iteration: int = 0) -> FrozenSnapshot:
        clone = policy.copy()
        clone.logits.setflags(write=False)
        return cls(clone, iteration)

    @property
    def logits(self) -> np.ndarray:
        return self.policy.logits


def new_grad_buffer(policy: TabularPolicy) -> np.ndarray:
    return np.zeros_like(policy.logits)


def accumulate_logprob_grad(
    policy: TabularPolicy, q: int, a: Sequence[int], t: int, coeff: float, buf: np.ndarray
) -> None:
    """Add ``coeff * d log pi(a_t | q, a_<t) / d logits`` into ``buf``."""
    if coeff == 0.0:
        return
    row = policy.task.row(q)
    ctx = policy.context_index(a[:t])
    p = softmax(policy.logits[row, ctx])
    g = -coeff * p
    g[int(a[t])] += coeff
    buf[row, ctx] += g


def accumulate_batch_grad(
    policy: TabularPolicy, rows: np.ndarray, answers: np.ndarray, coeffs: np.ndarray, buf: np.ndarray
) -> None:
    """Vectorised :func:`accumulate_logprob_grad` over every token of (M, L) answers."""
    rows = np.asarray(rows, dtype=np.int64)
    answers = np.asarray(answers, dtype=np.int64)
    ctx = policy.context_indices(answers)
    p = softmax(policy.logits[rows[:, None], ctx], axis=-1)
    onehot = np.eye(policy.task.vocab_size)[answers]
    contrib = coeffs[..., None] * (onehot - p)
    np.add.at(buf, (np.broadcast_to(rows[:, None], ctx.shape), ctx), contrib)


def random_policy(task: TaskSpec, rng: np.random.Generator, alpha: float = 1.0) -> TabularPolicy:
    """Policy whose every context distribution is a Dirichlet(alpha) draw."""
    policy = TabularPolicy(task)
    probs = rng.dirichlet(np.full(task.vocab_size, alpha), size=policy.logits.shape[:2])
    # Keep logits finite even when a Dirichlet coordinate underflows.
    policy.logits[:] = np.log(np.maximum(probs, 1e-300))
    return policy


def point_mass_policy(task: TaskSpec, answers: dict[int, Sequence[int]], scale: float = 50.0) -> TabularPolicy:
    """Policy that puts logit ``scale`` on ``answers[q]`` along its path and 0 elsewhere."""
    policy = TabularPolicy(task)
    for q, a in answers.items():
        row = task.row(q)
        for t in range(task.answer_len):
            policy.logits[row, policy.context_index(a[:t]), a[t]] = scale
    return policy


# -- checkpoints ------------------------------------------------------------


def _prefix_str(prefix: Sequence[int]) -> str:
    return ".".join(str(x) for x in prefix)


def checkpoint_lines(policy: TabularPolicy, iteration: int = 0) -> list[str]:
    task = policy.task
    header = {
        "format_version": CHECKPOINT_VERSION,
        "task_fingerprint": task.fingerprint(),
        "iteration": iteration,
        "V": task.vocab_size,
        "L": task.answer_len,
        "N": task.num_questions,
    }
    lines = [json.dumps(header)]
    for i, q in enumerate(task.questions):
        for c in range(policy.num_contexts):
            rec = {"q": q, "prefix": _prefix_str(policy.prefix_of(c)), "logits": policy.logits[i, c].tolist()}
            lines.append(json.dumps(rec))
    return lines


def save_checkpoint(policy: TabularPolicy, path: str | os.PathLike, iteration: int = 0) -> None:
    """Write a checkpoint atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(checkpoint_lines(policy, iteration)) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike, task: TaskSpec) -> tuple[TabularPolicy, int]:
    """Read a checkpoint written for ``task``; returns ``(policy, iteration)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header.get('format_version')}")
        if header["task_fingerprint"] != task.fingerprint():
            raise ContractError("checkpoint was written for a different task")
        policy = TabularPolicy(task)
        seen = 0
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            prefix = tuple(int(x) for x in rec["prefix"].split(".")) if rec["prefix"] else ()
            policy.logits[task.row(rec["q"]), policy.context_index(prefix)] = rec["logits"]
            seen += 1
    if seen != task.num_questions * policy.num_contexts:
        raise ContractError(f"checkpoint has {seen} rows, expected {task.num_questions * policy.num_contexts}")
    return policy, int(header["iteration"])
