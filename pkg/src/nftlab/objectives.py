"""Per-token losses and analytic gradients for NFT and its RL relatives.

Conventions
-----------
Every per-token operation returns a :class:`TokenGradReport` whose ``g`` is
the weight multiplying ``grad R`` in the *negative* loss gradient::

    d loss / d theta = -g * d R / d theta = -g * R * d log pi / d theta

so positive answers carry ``g >= 0`` and negative answers ``g <= 0``.  The
only exception is on-policy REINFORCE, whose ``g`` multiplies
``d log pi / d theta`` directly.  Gradient buffers always hold the gradient of
the loss, i.e. the direction an optimizer descends.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .errors import ContractError, DegenerateQuestion, DegeneratePartition
from .policy import TabularPolicy, accumulate_batch_grad, new_grad_buffer
from .rollout import Batch

KINDS = ("NFT", "RFT", "GRPO", "DRGRPO", "PG", "INFONCA")
OMEGA_KINDS = ("CONST", "ONE_MINUS_R", "SQRT_RATIO")
LOSS_NORMS = ("TOKEN_MEAN", "SUM")
PG_MODES = ("onpolicy", "is")


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "NFT"
    epsilon: float = 1.0
    eps_clip_low: float = 0.2
    eps_clip_high: float = 0.28
    omega_kind: str = "ONE_MINUS_R"
    beta: float = 0.1
    theory_mode: bool = False
    loss_norm: str = "TOKEN_MEAN"
    pg_mode: str = "onpolicy"
    negative_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.upper())
        object.__setattr__(self, "omega_kind", self.omega_kind.upper())
        object.__setattr__(self, "loss_norm", self.loss_norm.upper())
        object.__setattr__(self, "pg_mode", self.pg_mode.lower())
        if self.kind not in KINDS:
            raise ContractError(f"unknown objective kind {self.kind!r}")
        if self.omega_kind not in OMEGA_KINDS:
            raise ContractError(f"unknown omega kind {self.omega_kind!r}")
        if self.loss_norm not in LOSS_NORMS:
            raise ContractError(f"unknown loss normalisation {self.loss_norm!r}")
        if self.pg_mode not in PG_MODES:
            raise ContractError(f"unknown pg mode {self.pg_mode!r}")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be > 0")
        if not 0 < self.eps_clip_low < 1:
            raise ContractError("eps_clip_low must lie in (0, 1)")
        if not self.eps_clip_high > 0:
            raise ContractError("eps_clip_high must be > 0")
        if not self.beta > 0:
            raise ContractError("beta must be > 0")

    def with_(self, **changes) -> ObjectiveConfig:
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TokenGradReport:
    g: np.ndarray | float
    ratio: np.ndarray | float
    loss: np.ndarray | float


# -- shared primitives ---------------------------------------------------


def likelihood_ratio(new_logprob, old_logprob):
    return np.exp(np.subtract(new_logprob, old_logprob))


def _check_rate(r_hat) -> None:
    r_hat = np.asarray(r_hat)
    if np.any(r_hat <= 0) or np.any(r_hat >= 1):
        raise DegenerateQuestion("correctness rate must lie strictly inside (0, 1)")


def implicit_negative_ratio(R, r_hat):
    """``(1 - r_hat * R) / (1 - r_hat)``; may be <= 0 before clamping."""
    _check_rate(r_hat)
    return (1.0 - np.multiply(r_hat, R)) / (1.0 - np.asarray(r_hat))


def max_v(x, eps):
    """Straight-through floor.

    Returns ``(max(x, eps), clamped)``.  The gradient is taken as if no clamp
    happened, so ``d log max_v(x) / dx = 1 / max(x, eps)`` on both branches.
    """
    if not eps > 0:
        raise ContractError("eps must be > 0")
    x = np.asarray(x, dtype=float)
    value = np.maximum(x, eps)
    out = value if value.ndim else float(value)
    return out, x < eps


def omega(omega_kind: str, r_hat):
    _check_rate(r_hat)
    r_hat = np.asarray(r_hat, dtype=float)
    if omega_kind == "CONST":
        w = np.ones_like(r_hat)
    elif omega_kind == "ONE_MINUS_R":
        w = 1.0 - r_hat
    elif omega_kind == "SQRT_RATIO":
        w = np.sqrt((1.0 - r_hat) / r_hat)
    else:
        raise ContractError(f"unknown omega kind {omega_kind!r}")
    return w if w.ndim else float(w)


def normalized_advantage(rewards: Sequence[int], use_std: bool = True) -> np.ndarray:
    """Group-relative advantage with population std (or mean-centring only)."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0 or np.any((r != 0) & (r != 1)):
        raise ContractError("rewards must be a non-empty binary vector")
    centred = r - r.mean()
    if not use_std:
        return centred
    std = r.std()
    if std == 0:
        raise DegenerateQuestion("advantage undefined when all rewards are equal")
    return centred / std


def advantage_from_rate(r, r_hat, use_std: bool = True):
    """Advantage of a binary reward ``r`` in a group with correctness rate ``r_hat``."""
    r_hat = np.asarray(r_hat, dtype=float)
    centred = np.asarray(r, dtype=float) - r_hat
    if not use_std:
        return centred
    _check_rate(r_hat)
    return centred / np.sqrt(r_hat * (1.0 - r_hat))


def _scalar(report: TokenGradReport) -> TokenGradReport:
    for name in ("g", "ratio", "loss"):
        val = np.asarray(getattr(report, name))
        if val.ndim == 0:
            setattr(report, name, float(val))
    return report


# -- per-token objectives ---------------------------------------------------


def nft_token_grad(r, R, r_hat, cfg: ObjectiveConfig, clamp_offset=None) -> TokenGradReport:
    """NFT token term ``-w [r log R + (1-r) log max_v(neg_ratio, eps)]``.

    ``clamp_offset`` replaces the floor by a fixed additive offset
    ``value = neg_ratio + clamp_offset``; with the offset frozen at
    ``max(x0, eps) - x0`` this gives a smooth function whose gradient at the
    anchor equals the straight-through gradient (used by finite-difference checks).
    """
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0):
        raise ContractError("likelihood ratio must be positive")
    r = np.asarray(r, dtype=float)
    w = omega(cfg.omega_kind, r_hat)
    x = implicit_negative_ratio(R, r_hat)
    if clamp_offset is None:
        v, _ = max_v(x, cfg.epsilon)
    else:
        v = x + clamp_offset
    v = np.asarray(v, dtype=float)
    slope = -np.asarray(r_hat) / (1.0 - np.asarray(r_hat))
    pos = 0.0 if cfg.negative_only else r
    loss = -w * (pos * np.log(R) + (1.0 - r) * np.log(v))
    g = w * (pos / R + (1.0 - r) * slope / v)
    return _scalar(TokenGradReport(g, R, loss))


def theory_loss_seq(r, seq_R, r_hat, cfg: ObjectiveConfig) -> float:
    """Sequence-level NFT loss for one answer; ``seq_R`` is the whole-answer ratio."""
    return nft_token_grad(r, seq_R, r_hat, cfg).loss


def grpo_token_grad(r, R, r_hat, cfg: ObjectiveConfig, use_std: bool = True) -> TokenGradReport:
    """Clipped surrogate ``-min(R A, clip(R, 1-lo, 1+hi) A)`` with its indicator gradient.

    At the kinks ``R = 1 + hi`` and ``R = 1 - lo`` the strict indicators
    ``R < 1 + hi`` (A > 0) and ``R > 1 - lo`` (A < 0) decide.
    """
    R = np.asarray(R, dtype=float)
    A = np.asarray(advantage_from_rate(r, r_hat, use_std), dtype=float)
    lo, hi = 1.0 - cfg.eps_clip_low, 1.0 + cfg.eps_clip_high
    loss = -np.minimum(R * A, np.clip(R, lo, hi) * A)
    g = np.where(A > 0, A * (R < hi), np.where(A < 0, A * (R > lo), 0.0))
    return _scalar(TokenGradReport(g, R, loss))


def rft_token_grad(r, R, cfg: ObjectiveConfig | None = None) -> TokenGradReport:
    """Positive-only likelihood term with constant prompt weight."""
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float)
    loss = -r * np.log(R)
    return _scalar(TokenGradReport(r / R, R, loss))


def pg_token_grad(r, R, mode: str = "onpolicy") -> TokenGradReport:
    """REINFORCE term.

    ``onpolicy``: loss ``-r log R`` and ``g = r`` multiplies ``grad log pi``.
    ``is``: loss ``-r R`` and ``g = r`` multiplies ``grad R``.
    """
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float)
    if mode == "onpolicy":
        loss = -r * np.log(R)
    elif mode == "is":
        loss = -r * R
    else:
        raise ContractError(f"unknown pg mode {mode!r}")
    return _scalar(TokenGradReport(r * np.ones_like(R), R, loss))


def infonca_loss(rewards, seq_log_ratios, beta: float) -> tuple[float, np.ndarray]:
    """Cross-entropy between reward-normalised targets and ``softmax(beta * S)``.

    Returns the loss and its gradient with respect to each ``S_k``.
    """
    r = np.asarray(rewards, dtype=float)
    total = r.sum()
    if total <= 0:
        raise ContractError("InfoNCA needs at least one positive answer")
    target = r / total
    z = beta * np.asarray(seq_log_ratios, dtype=float)
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    loss = float(-(target @ logp))
    return loss, beta * (np.exp(logp) - target)


# -- batch objective --------------------------------------------------------


@dataclass
class BatchReport:
    """Per-unit coefficients of a mini-batch.

    ``g``, ``ratio`` and ``loss`` are (M, L) for token-level objectives and (M,)
    for sequence-level ones (theory-mode NFT, InfoNCA).
    """

    refs: np.ndarray
    g: np.ndarray
    ratio: np.ndarray
    loss: np.ndarray


@dataclass
class _Gathered:
    rows: np.ndarray
    answers: np.ndarray
    rewards: np.ndarray
    r_hat: np.ndarray
    old: np.ndarray
    weights: np.ndarray
    group: np.ndarray


def _gather(batch: Batch, policy: TabularPolicy) -> _Gathered:
    if len(batch) == 0:
        raise DegeneratePartition("empty batch")
    task = policy.task
    gi, k = batch.refs[:, 0], batch.refs[:, 1]
    sizes = np.array([g.K for g in batch.groups])
    offset = np.concatenate([[0], np.cumsum(sizes)])[gi] + k
    cat = lambda name: np.concatenate([getattr(g, name) for g in batch.groups])[offset]
    return _Gathered(
        rows=np.array([task.row(batch.groups[i].q) for i in gi], dtype=np.int64),
        answers=cat("answers"),
        rewards=cat("rewards").astype(float),
        r_hat=np.array([batch.groups[i].r_hat for i in gi]),
        old=cat("old_token_logprobs"),
        weights=cat("weights"),
        group=gi,
    )


def _coefficients(d: _Gathered, new_lp: np.ndarray, cfg: ObjectiveConfig, clamp_offsets=None):
    """Loss per unit, report, and d(loss)/d(log pi) per token (before weighting)."""
    logR = new_lp - d.old
    R = np.exp(logR)
    r = d.rewards[:, None]
    rh = d.r_hat[:, None]
    kind = cfg.kind
    if kind == "NFT" and cfg.theory_mode:
        seq_R = np.exp(logR.sum(axis=1))
        rep = nft_token_grad(d.rewards, seq_R, d.r_hat, cfg, clamp_offsets)
        g = np.asarray(rep.g)
        coeff = np.broadcast_to((-g * seq_R)[:, None], R.shape)
        return np.asarray(rep.loss), g, seq_R, coeff
    if kind == "NFT":
        rep = nft_token_grad(r, R, rh, cfg, clamp_offsets)
    elif kind == "RFT":
        rep = rft_token_grad(r, R, cfg)
    elif kind in ("GRPO", "DRGRPO"):
        rep = grpo_token_grad(r, R, rh, cfg, use_std=(kind == "GRPO"))
    elif kind == "PG":
        rep = pg_token_grad(r, R, cfg.pg_mode)
        g = np.asarray(rep.g)
        coeff = -g if cfg.pg_mode == "onpolicy" else -g * R
        return np.asarray(rep.loss), g, R, coeff
    elif kind == "INFONCA":
        S = logR.sum(axis=1)
        loss = np.zeros(len(S))
        dS = np.zeros(len(S))
        for gid in np.unique(d.group):
            idx = np.flatnonzero(d.group == gid)
            # A group's contrastive set is the subset of its answers present in this mini-batch.
            if d.rewards[idx].sum() == 0:
                continue
            group_loss, grad = infonca_loss(d.rewards[idx], S[idx], cfg.beta)
            loss[idx[0]] = group_loss
            dS[idx] = grad
        coeff = np.broadcast_to(dS[:, None], R.shape)
        return loss, -dS, S, coeff
    else:  # pragma: no cover - guarded by ObjectiveConfig
        raise ContractError(kind)
    g = np.asarray(rep.g)
    return np.asarray(rep.loss), g, R, -g * R


def _normaliser(d: _Gathered, cfg: ObjectiveConfig, L: int) -> float:
    if cfg.loss_norm == "SUM":
        return 1.0
    return float(d.weights.sum() * L)


def nft_clamp_offsets(batch: Batch, policy: TabularPolicy, cfg: ObjectiveConfig) -> np.ndarray:
    """Frozen ``max(x, eps) - x`` offsets of the NFT negative branch at the current policy."""
    d = _gather(batch, policy)
    logR = policy.token_logprobs(d.rows, d.answers) - d.old
    if cfg.theory_mode:
        x = implicit_negative_ratio(np.exp(logR.sum(axis=1)), d.r_hat)
    else:
        x = implicit_negative_ratio(np.exp(logR), d.r_hat[:, None])
    return np.maximum(x, cfg.epsilon) - x


def batch_loss(batch: Batch, policy: TabularPolicy, cfg: ObjectiveConfig, clamp_offsets=None) -> float:
    """Scalar mini-batch loss (the quantity whose gradient :func:`batch_loss_and_grad` returns)."""
    d = _gather(batch, policy)
    new_lp = policy.token_logprobs(d.rows, d.answers)
    loss, _, _, _ = _coefficients(d, new_lp, cfg, clamp_offsets)
    w = d.weights if loss.ndim == 1 else d.weights[:, None]
    if cfg.kind == "INFONCA":
        w = np.ones_like(loss)
    return float((w * loss).sum() / _normaliser(d, cfg, policy.task.answer_len))


def batch_loss_and_grad(
    batch: Batch, policy: TabularPolicy, cfg: ObjectiveConfig
) -> tuple[float, np.ndarray, BatchReport]:
    """Loss, gradient buffer and per-unit report for one mini-batch.

    Old per-token log-likelihoods come from the groups' rollout-time cache.
    """
    d = _gather(batch, policy)
    new_lp = policy.token_logprobs(d.rows, d.answers)
    loss, g, ratio, coeff = _coefficients(d, new_lp, cfg)
    norm = _normaliser(d, cfg, policy.task.answer_len)
    if cfg.kind == "INFONCA":
        w = np.ones(len(d.weights))
    else:
        w = d.weights
    wl = w if loss.ndim == 1 else w[:, None]
    total = float((wl * loss).sum() / norm)
    buf = new_grad_buffer(policy)
    accumulate_batch_grad(policy, d.rows, d.answers, coeff * (w[:, None] / norm), buf)
    return total, buf, BatchReport(batch.refs.copy(), g, ratio, loss)


# -- gradient weight curves -------------------------------------------------

CURVE_COLUMNS = ("R", "nft_pos", "nft_neg", "grpo_pos", "grpo_neg")


def weight_curves(
    r_hat: float, eps: float, eps_clip_low: float, eps_clip_high: float, R_grid: Sequence[float]
) -> list[tuple[float, float, float, float, float]]:
    """Gradient weights of NFT (with the GRPO-aligned prompt weight) and GRPO versus R."""
    cfg = ObjectiveConfig(
        kind="NFT", epsilon=eps, eps_clip_low=eps_clip_low, eps_clip_high=eps_clip_high, omega_kind="SQRT_RATIO"
    )
    R = np.asarray(R_grid, dtype=float)
    nft_pos = nft_token_grad(1.0, R, r_hat, cfg).g
    nft_neg = nft_token_grad(0.0, R, r_hat, cfg).g
    grpo_pos = grpo_token_grad(1.0, R, r_hat, cfg).g
    grpo_neg = grpo_token_grad(0.0, R, r_hat, cfg).g
    cols = [np.broadcast_to(np.asarray(c, dtype=float), R.shape) for c in (R, nft_pos, nft_neg, grpo_pos, grpo_neg)]
    return [tuple(float(c[i]) for c in cols) for i in range(len(R))]


def write_weight_curves(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in rows:
            writer.writerow([repr(x) for x in row])
