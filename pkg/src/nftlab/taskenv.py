"""Synthetic verifiable tasks with enumerable answer spaces.

A task is a finite set of questions, a token alphabet ``0..V-1``, a fixed
answer length ``L`` and a closed-form binary verifier.  Three verifier rules
are built in:

``modsum``  reward 1 iff ``sum(a) % V`` equals the question's target
``exact``   reward 1 iff ``a`` equals the question's golden sequence
``prefix``  reward 1 iff ``a`` starts with the question's designated prefix
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, OracleUnavailable

ORACLE_CAP = 10**6
RULES = ("modsum", "exact", "prefix")


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int
    answer_len: int
    questions: tuple[int, ...]
    rule: str
    # One resolved parameter tuple per question: (target,) for modsum,
    # the golden sequence for exact, the required prefix for prefix.
    params: tuple[tuple[int, ...], ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ContractError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.answer_len < 1:
            raise ContractError(f"answer_len must be >= 1, got {self.answer_len}")
        if self.rule not in RULES:
            raise ContractError(f"unknown verifier rule {self.rule!r}")
        if len(set(self.questions)) != len(self.questions):
            raise ContractError("question ids must be unique")
        if len(self.params) != len(self.questions):
            raise ContractError("need one parameter tuple per question")
        V, L = self.vocab_size, self.answer_len
        for p in self.params:
            if any(not 0 <= x < V for x in p):
                raise ContractError(f"rule parameter out of vocabulary: {p}")
            if self.rule == "modsum" and len(p) != 1:
                raise ContractError("modsum takes one target per question")
            if self.rule == "exact" and len(p) != L:
                raise ContractError("exact golden sequences must have length L")
            if self.rule == "prefix" and not 1 <= len(p) <= L:
                raise ContractError("prefix length must lie in [1, L]")
        object.__setattr__(self, "_index", {q: i for i, q in enumerate(self.questions)})

    @property
    def num_questions(self) -> int:
        return len(self.questions)

    @property
    def answer_space_size(self) -> int:
        return self.vocab_size**self.answer_len

    def row(self, q: int) -> int:
        """Position of question id ``q`` in ``questions``."""
        try:
            return self._index[q]
        except KeyError:
            raise ContractError(f"unknown question id {q}") from None

    @functools.cached_property
    def _param_array(self) -> np.ndarray:
        arr = np.array(self.params, dtype=np.int64)
        arr.setflags(write=False)
        return arr

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "answer_len": self.answer_len,
            "questions": list(self.questions),
            "rule": self.rule,
            "params": [list(p) for p in self.params],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def make_task(
    vocab_size: int,
    answer_len: int,
    num_questions: int,
    rule: str = "modsum",
    rule_params: Sequence[int] = (),
    seed: int = 0,
) -> TaskSpec:
    """Build a task, drawing unspecified per-question parameters from ``seed``.

    ``rule_params`` may give the parameters explicitly, either shared by every
    question or listed for each question in turn:

    - modsum: ``[]`` random targets, ``[t]`` shared, or ``N`` targets
    - exact: ``[]`` random goldens, ``L`` values shared, or ``N*L`` values
    - prefix: ``[P]`` random prefixes of length P, ``[P, *prefix]`` shared,
      or ``[P, *N*P values]``; ``[]`` means ``P = 1``
    """
    V, L, N = vocab_size, answer_len, num_questions
    if N < 1:
        raise ContractError("num_questions must be >= 1")
    rp = [int(x) for x in rule_params]
    rng = np.random.default_rng(seed)

    def split(values, width):
        if len(values) == width:
            return [tuple(values)] * N
        if len(values) == N * width:
            return [tuple(values[i * width : (i + 1) * width]) for i in range(N)]
        raise ContractError(
            f"{rule}: expected 0, {width} or {N * width} rule params, got {len(values)}"
        )

    if rule == "modsum":
        params = [tuple(int(x) for x in row) for row in rng.integers(0, V, (N, 1))] if not rp else split(rp, 1)
    elif rule == "exact":
        params = [tuple(int(x) for x in row) for row in rng.integers(0, V, (N, L))] if not rp else split(rp, L)
    elif rule == "prefix":
        P = rp[0] if rp else 1
        rest = rp[1:]
        if not 1 <= P <= L:
            raise ContractError(f"prefix length {P} outside [1, {L}]")
        params = [tuple(int(x) for x in row) for row in rng.integers(0, V, (N, P))] if not rest else split(rest, P)
    else:
        raise ContractError(f"unknown verifier rule {rule!r}")
    return TaskSpec(V, L, tuple(range(N)), rule, tuple(params))


def task_from_config(section: Mapping[str, str]) -> TaskSpec:
    """Build a task from a key-value config section (all values are strings)."""
    known = {"vocab_size", "answer_len", "num_questions", "rule", "rule_params", "seed"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown task key(s): {', '.join(sorted(unknown))}")
    try:
        rule_params = [int(x) for x in section.get("rule_params", "").split(",") if x.strip()]
        return make_task(
            vocab_size=int(section["vocab_size"]),
            answer_len=int(section["answer_len"]),
            num_questions=int(section["num_questions"]),
            rule=section.get("rule", "modsum").strip().lower(),
            rule_params=rule_params,
            seed=int(section.get("seed", "0")),
        )
    except KeyError as exc:
        raise ConfigError(f"missing task key {exc.args[0]}") from None
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None


def _check_answers(task: TaskSpec, answers: np.ndarray) -> None:
    if answers.ndim != 2 or answers.shape[1] != task.answer_len:
        raise ContractError(f"answers must have length {task.answer_len}")
    if answers.size and (answers.min() < 0 or answers.max() >= task.vocab_size):
        raise ContractError("answer token outside vocabulary")


def verify_rows(task: TaskSpec, rows: np.ndarray, answers: np.ndarray) -> np.ndarray:
    """Vectorised verifier: ``rows`` are question positions, ``answers`` is (M, L)."""
    answers = np.asarray(answers, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    _check_answers(task, answers)
    params = task._param_array[rows]
    if task.rule == "modsum":
        ok = answers.sum(axis=1) % task.vocab_size == params[:, 0]
    else:
        width = params.shape[1]
        ok = np.all(answers[:, :width] == params, axis=1)
    return ok.astype(np.int64)


def verify(task: TaskSpec, q: int, a: Sequence[int]) -> int:
    answer = np.asarray(a, dtype=np.int64).reshape(1, -1)
    return int(verify_rows(task, np.array([task.row(q)]), answer)[0])


def check_oracle_cap(task: TaskSpec) -> None:
    if task.answer_space_size > ORACLE_CAP:
        raise OracleUnavailable(
            f"answer space {task.vocab_size}^{task.answer_len} exceeds cap {ORACLE_CAP}"
        )


@functools.lru_cache(maxsize=32)
def _grid(V: int, L: int) -> np.ndarray:
    grid = np.indices((V,) * L).reshape(L, -1).T.astype(np.int64)
    grid.setflags(write=False)
    return grid


def enumerate_answers(task: TaskSpec) -> np.ndarray:
    """All ``V**L`` answers in lexicographic order, as a read-only (V**L, L) array."""
    check_oracle_cap(task)
    return _grid(task.vocab_size, task.answer_len)


def answer_rewards(task: TaskSpec, q: int) -> np.ndarray:
    """Verifier outcome for every enumerated answer of question ``q``."""
    grid = enumerate_answers(task)
    return verify_rows(task, np.full(len(grid), task.row(q)), grid)


def correctness_rate_exact(task: TaskSpec, q: int, policy) -> float:
    """Exact probability that ``policy`` answers ``q`` correctly."""
    probs = np.exp(policy.answer_logprobs(q))
    return float(probs @ answer_rewards(task, q))
