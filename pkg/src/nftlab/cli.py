"""Command-line entry point: ``nftlab {train,verify,curves,compare,dump-rollouts}``."""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import suites
from .config import OUTPUT_ROOT_ENV, RunConfig, load_config, serialize_config
from .errors import ConfigError, ContractError
from .objectives import KINDS, weight_curves, write_weight_curves
from .policy import TabularPolicy, load_checkpoint
from .rollout import collect_groups, write_rollouts
from .trainer import MetricsRecord, run_experiment

log = logging.getLogger("nftlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GLOBAL_DEFAULTS = {"seed": None, "override": None, "no_timestamp": False, "verbose": False}


def _open_output(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w")


def _header_line(cfg: RunConfig) -> str:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return json.dumps({"started": stamp, "task": cfg.build_task().fingerprint()})


def _train(cfg: RunConfig, metrics_path: Path, checkpoint_path: Path | None, timestamp: bool):
    task = cfg.build_task()
    rollout_path = cfg.output.resolve("rollout_dump_path")
    rollout_fh = _open_output(rollout_path) if rollout_path else None
    try:
        with _open_output(metrics_path) as fh:
            if timestamp:
                fh.write(_header_line(cfg) + "\n")
            return run_experiment(cfg.trainer, cfg.objective, task, fh, checkpoint_path, rollout_fh)
    finally:
        if rollout_fh is not None:
            rollout_fh.close()


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def cmd_train(args) -> int:
    cfg = _load(args)
    result = _train(cfg, cfg.output.resolve("metrics_path"), cfg.output.resolve("checkpoint_path"), not args.no_timestamp)
    f = result.final
    print(
        f"final_accuracy={_fmt(f.train_accuracy)} final_entropy={_fmt(f.mean_entropy)} "
        f"wall_time={result.wall_time:.2f}s iterations={f.iteration}"
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    records = suites.run_suite(args.suite, args.seed or 0)
    for rec in records:
        status = "PASS" if rec.passed else "FAIL"
        print(f"{status} {rec.check}: {rec.max_abs_diff:.3e} (threshold {rec.threshold:.0e})")
    return EXIT_OK if all(r.passed for r in records) else EXIT_FAIL


def _float_list(text: str, n: int, what: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"{what} must be {n} comma-separated numbers, got {text!r}") from None
    if len(values) != n:
        raise ConfigError(f"{what} must be {n} comma-separated numbers, got {text!r}")
    return values


def cmd_curves(args) -> int:
    lo, hi = _float_list(args.eps_clip, 2, "--eps-clip")
    gmin, gmax, steps = _float_list(args.grid, 3, "--grid")
    if steps < 2 or steps != int(steps) or not 0 < gmin < gmax:
        raise ConfigError(f"--grid needs 0 < min < max and an integer steps >= 2, got {args.grid!r}")
    grid = np.linspace(gmin, gmax, int(steps))
    if args.include_one and not np.any(grid == 1.0):
        grid = np.sort(np.append(grid, 1.0))
    try:
        rows = weight_curves(args.r_hat, args.eps, lo, hi, grid)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    out = _output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weight_curves(out, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def _compare_one(job):
    cfg, metrics_path = job
    result = _train(cfg, metrics_path, None, timestamp=False)
    return [r.to_json() for r in result.records], result.final


def cmd_compare(args) -> int:
    base = _load(args)
    objectives = [o.strip().upper() for o in args.objectives.split(",") if o.strip()]
    if len(objectives) < 2:
        raise ConfigError("--objectives needs at least two entries")
    unknown = [o for o in objectives if o not in KINDS]
    if unknown:
        raise ConfigError(f"unknown objective {unknown[0]!r}; choose from {', '.join(KINDS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None

    metrics = base.output.resolve("metrics_path")
    stem = metrics.with_suffix("")
    jobs, keys = [], []
    for i, kind in enumerate(objectives):
        for seed in seeds:
            cfg = RunConfig(
                base.task,
                base.trainer.with_(seed=seed),
                base.objective.with_(kind=kind),
                base.output,
            )
            jobs.append((cfg, Path(f"{stem}.{i}-{kind.lower()}.seed{seed}.jsonl")))
            keys.append((i, kind, seed))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_compare_one, jobs))
    else:
        results = [_compare_one(j) for j in jobs]

    table = Path(f"{stem}.compare.csv")
    fieldnames = ["objective", "seed"] + list(MetricsRecord.__dataclass_fields__)
    with _open_output(table) as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for (_, kind, seed), (lines, _) in zip(keys, results):
            for line in lines:
                writer.writerow({"objective": kind, "seed": seed, **json.loads(line)})

    summary = Path(f"{stem}.summary.csv")
    with _open_output(summary) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["objective", "mean_accuracy", "std_accuracy", "mean_entropy", "runs"])
        for i, kind in enumerate(objectives):
            finals = [final for (j, _, _), (_, final) in zip(keys, results) if j == i]
            acc = np.array([f.train_accuracy if f.train_accuracy is not None else np.nan for f in finals])
            ent = np.array([f.mean_entropy if f.mean_entropy is not None else np.nan for f in finals])
            writer.writerow([kind, repr(float(acc.mean())), repr(float(acc.std())), repr(float(ent.mean())), len(finals)])
            print(f"{kind:8s} accuracy {acc.mean():.4f} +/- {acc.std():.4f}  entropy {ent.mean():.4f}  ({len(finals)} runs)")
    print(f"wrote {table} and {summary}")
    return EXIT_OK


def cmd_dump_rollouts(args) -> int:
    cfg = _load(args)
    task = cfg.build_task()
    if args.checkpoint:
        policy, iteration = load_checkpoint(_output_path(args.checkpoint), task)
    else:
        policy, iteration = TabularPolicy(task), 0
    groups = collect_groups(policy.freeze(iteration), task.questions, cfg.trainer.K, cfg.trainer.seed, iteration)
    out = _output_path(args.out) if args.out else cfg.output.resolve("rollout_dump_path")
    if out is None:
        raise ConfigError("no output path: pass --out or set output.rollout_dump_path")
    with _open_output(out) as fh:
        write_rollouts(fh, groups, iteration)
    print(f"wrote {sum(g.K for g in groups)} rollouts to {out}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(serialize_config(_load(args)))
    return EXIT_OK


def _output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _load(args) -> RunConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"trainer.seed={args.seed}")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subcommand parser from resetting values given before it.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides trainer.seed (and seeds the verify suites)")
    common.add_argument("--override", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE", help="repeatable config override")
    common.add_argument("--no-timestamp", action="store_true", default=argparse.SUPPRESS, help="omit the timestamp header in metrics files")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="nftlab",
        parents=[common],
        description=f"Tabular RL-from-verifier lab. Relative output paths resolve under ${OUTPUT_ROOT_ENV} when set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run one experiment")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", parents=[common], help="run oracle suites")
    p.add_argument("suite", choices=[*suites.SUITES, "all"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("curves", parents=[common], help="write gradient weight curves as CSV")
    p.add_argument("--r-hat", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--eps-clip", default="0.2,0.28", help="low,high")
    p.add_argument("--grid", default="0.05,3.0,60", help="min,max,steps over R")
    p.add_argument("--no-include-one", dest="include_one", action="store_false", help="do not force an R=1 row")
    p.add_argument("--out", default="curves.csv")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("compare", parents=[common], help="paired-seed runs of several objectives")
    p.add_argument("config")
    p.add_argument("--objectives", default="NFT,RFT")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dump-rollouts", parents=[common], help="sample and write one round of rollouts")
    p.add_argument("config")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_dump_rollouts)

    p = sub.add_parser("show-config", parents=[common], help="print the fully resolved config")
    p.add_argument("config")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
