"""Acceptance criteria, one test each, at their stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
lists one PASS/FAIL line per criterion.
"""

import csv
import time

import numpy as np
import pytest

from nftlab import suites
from nftlab.cli import main
from nftlab.config import OUTPUT_ROOT_ENV
from nftlab.objectives import ObjectiveConfig, grpo_token_grad
from nftlab.taskenv import make_task
from nftlab.trainer import TrainerConfig, run_experiment


def test_split_identity(criterion):
    start = time.monotonic()
    (rec,) = suites.identities(seed=0, n_tasks=25)
    elapsed = time.monotonic() - start
    ok = rec.max_abs_diff < 1e-12 and elapsed < 5.0
    criterion(1, "split identity", ok, f"max residual {rec.max_abs_diff:.2e} (< 1e-12), {elapsed:.2f}s (< 5s)")
    assert rec.max_abs_diff < 1e-12
    assert elapsed < 5.0


def test_onpolicy_equivalence(criterion):
    start = time.monotonic()
    recs = suites.equivalence(seed=0, n_batches=50)
    elapsed = time.monotonic() - start
    diffs = {r.check: r.max_abs_diff for r in recs}
    ok = all(d < 1e-10 for d in diffs.values()) and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in diffs.items())
    criterion(2, "on-policy equivalence", ok, f"{detail} (< 1e-10), {elapsed:.2f}s (< 10s)")
    assert all(d < 1e-10 for d in diffs.values())
    assert elapsed < 10.0


def test_gradient_correctness(criterion):
    start = time.monotonic()
    recs = suites.gradcheck(seed=0, n_points=20)
    elapsed = time.monotonic() - start
    worst = max(r.max_abs_diff for r in recs)
    ok = worst < 1e-6 and elapsed < 60.0
    criterion(3, "finite-difference gradients", ok, f"worst relative error {worst:.2e} over {len(recs)} objectives x 20 points (< 1e-6), {elapsed:.1f}s (< 60s)")
    for r in recs:
        assert r.max_abs_diff < 1e-6, r.check
    assert elapsed < 60.0


def test_convergence_to_positive_policy(criterion):
    start = time.monotonic()
    res = suites.convergence_runs(seed=0, n_tasks=5, steps=5000, record_every=1)
    elapsed = time.monotonic() - start
    never = 5001
    neg_steps = [s if s is not None else never for s in res.negative_steps]
    full_steps = [s if s is not None else never for s in res.full_steps]
    reached = all(s < never for s in neg_steps)
    faster = all(f <= n for f, n in zip(full_steps, neg_steps)) and all(s < never for s in full_steps)
    ok = reached and faster and elapsed < 120.0
    criterion(
        4,
        "exact-expectation convergence",
        ok,
        f"final KL negative-only max {max(res.negative_kl):.2e}, full max {max(res.full_kl):.2e} (< 1e-6 within 5000 steps), {elapsed:.1f}s (< 120s)",
    )
    assert reached, f"negative-only final KL {res.negative_kl}"
    assert faster, f"full objective steps {res.full_steps} vs negative-only {res.negative_steps}"
    assert elapsed < 120.0


def test_weight_curves(tmp_path, monkeypatch, criterion):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["curves", "--r-hat", "0.5", "--eps", "1.0", "--eps-clip", "0.2,0.28", "--grid", "0.05,3.0,296", "--out", "curves.csv"]) == 0
    with open(tmp_path / "curves.csv") as fh:
        rows = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    R = np.array([r["R"] for r in rows])
    col = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    # Independent closed forms at r_hat = 0.5, eps = 1.
    nft_pos = 1.0 / R
    nft_neg = -1.0 / np.maximum(2.0 - R, 1.0)
    err = max(np.max(np.abs(col["nft_pos"] - nft_pos)), np.max(np.abs(col["nft_neg"] - nft_neg)))
    one = np.flatnonzero(R == 1.0)
    at_one = len(one) == 1 and col["nft_pos"][one[0]] == col["grpo_pos"][one[0]] and col["nft_neg"][one[0]] == col["grpo_neg"][one[0]]
    beyond_hi, beyond_lo = R >= 1.28, R <= 0.8
    zero_clip = np.all(col["grpo_pos"][beyond_hi] == 0.0) and np.all(col["grpo_neg"][beyond_lo] == 0.0)
    inside = np.all(col["grpo_pos"][~beyond_hi] == 1.0) and np.all(col["grpo_neg"][~beyond_lo] == -1.0)
    ok = err < 1e-12 and at_one and zero_clip and inside
    criterion(5, "weight curves", ok, f"closed-form error {err:.1e} (< 1e-12), R=1 pairs equal: {at_one}, GRPO zero beyond clip: {zero_clip}")
    assert err < 1e-12
    assert at_one
    assert zero_clip and inside


def test_surrogate_consistency(criterion):
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    cfg = ObjectiveConfig()
    lo, hi = 1 - cfg.eps_clip_low, 1 + cfg.eps_clip_high
    R = rng.uniform(0.3, 2.0, 30_000)
    R = R[(np.abs(R - lo) > 1e-3) & (np.abs(R - hi) > 1e-3)][:10_000]
    r_hat = rng.uniform(0.02, 0.98, len(R))
    r = rng.integers(0, 2, len(R)).astype(float)
    # Generic route: autograd through the min/clip surrogate.
    A = torch.tensor((r - r_hat) / np.sqrt(r_hat * (1 - r_hat)), dtype=torch.float64)
    Rt = torch.tensor(R, dtype=torch.float64, requires_grad=True)
    loss = -torch.minimum(Rt * A, torch.clamp(Rt, lo, hi) * A)
    loss.sum().backward()
    generic = -Rt.grad.numpy()
    closed = grpo_token_grad(r, R, r_hat, cfg).g
    diff = float(np.max(np.abs(generic - closed)))
    ok = len(R) == 10_000 and diff < 1e-12
    criterion(6, "clipped surrogate gradient", ok, f"inf-norm diff {diff:.1e} at {len(R)} points (< 1e-12)")
    assert len(R) == 10_000
    assert diff < 1e-12


# Toy-scale replication setting. Adam mirrors the reference optimiser family;
# the learning rate is the tabular default and NFT keeps its default prompt
# weight (1 - r_hat) and eps = 1.
REPLICATION = dict(iterations=300, K=8, num_minibatches=16, optimizer="ADAM", learning_rate=1e-2)


@pytest.mark.slow
def test_directional_replication(criterion):
    task = make_task(4, 3, 32, "modsum", seed=0)
    start = time.monotonic()
    finals = {"NFT": [], "RFT": []}
    for seed in range(5):
        cfg = TrainerConfig(seed=seed, **REPLICATION)
        for kind in finals:
            finals[kind].append(run_experiment(cfg, ObjectiveConfig(kind=kind), task).final)
    elapsed = time.monotonic() - start
    acc = {k: float(np.mean([f.train_accuracy for f in v])) for k, v in finals.items()}
    ent = {k: [f.mean_entropy for f in v] for k, v in finals.items()}
    wins = sum(n > r for n, r in zip(ent["NFT"], ent["RFT"]))
    acc_ok = acc["NFT"] >= acc["RFT"] - 0.01
    ok = acc_ok and wins >= 3 and elapsed < 600
    criterion(
        7,
        "directional NFT vs RFT",
        ok,
        f"mean accuracy NFT {acc['NFT']:.4f} vs RFT {acc['RFT']:.4f} (need >= RFT - 0.01), "
        f"NFT entropy higher in {wins}/5 seeds (need >= 3; NFT {np.round(ent['NFT'], 3).tolist()}, RFT {np.round(ent['RFT'], 3).tolist()}), {elapsed:.0f}s",
    )
    assert acc_ok
    assert wins >= 3
    assert elapsed < 600


def test_cli_determinism(tmp_path, monkeypatch, criterion):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    config = tmp_path / "run.ini"
    config.write_text(
        "[task]\nvocab_size = 4\nanswer_len = 3\nnum_questions = 16\nrule = modsum\nseed = 2\n\n"
        "[trainer]\niterations = 25\nK = 8\noptimizer = ADAM\nlearning_rate = 0.01\nseed = 9\n\n"
        "[objective]\nkind = NFT\n\n[output]\nmetrics_path = m.jsonl\ncheckpoint_path = p.ckpt\n"
    )
    streams = []
    for _ in range(2):
        assert main(["train", str(config), "--no-timestamp"]) == 0
        streams.append((tmp_path / "m.jsonl").read_bytes())
    ok = streams[0] == streams[1] and len(streams[0].splitlines()) == 25
    criterion(8, "CLI determinism", ok, f"two runs byte-identical: {streams[0] == streams[1]} ({len(streams[0])} bytes, 25 lines)")
    assert streams[0] == streams[1]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
