"""Run configuration: INI-style sections with dotted-path overrides.

Example::

    [task]
    vocab_size = 4
    answer_len = 3
    num_questions = 32
    rule = modsum
    seed = 0

    [trainer]
    iterations = 300
    K = 8

    [objective]
    kind = NFT

    [output]
    metrics_path = runs/nft.jsonl
    checkpoint_path = runs/nft.ckpt

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, ContractError
from .objectives import ObjectiveConfig
from .taskenv import TaskSpec, task_from_config
from .trainer import TrainerConfig

OUTPUT_ROOT_ENV = "NFTLAB_OUTPUT_ROOT"
TASK_KEYS = ("vocab_size", "answer_len", "num_questions", "rule", "rule_params", "seed")
SECTIONS = ("task", "trainer", "objective", "output")


@dataclass(frozen=True)
class OutputConfig:
    metrics_path: str = "metrics.jsonl"
    checkpoint_path: str = "policy.ckpt"
    rollout_dump_path: str | None = None

    def resolve(self, name: str) -> Path | None:
        value = getattr(self, name)
        if value is None:
            return None
        path = Path(value)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        return path


@dataclass(frozen=True)
class RunConfig:
    task: dict = field(default_factory=dict)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def build_task(self) -> TaskSpec:
        return task_from_config(self.task)


def _parse_value(raw: str, hint, where: str):
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(cls, values: dict, section: str, lines: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"{_where(section, key, lines)}: unknown key {key!r}")
        kwargs[key] = _parse_value(raw, hints[key], _where(section, key, lines))
    try:
        return cls(**kwargs)
    except ContractError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _where(section: str, key: str, lines: dict) -> str:
    line = lines.get((section, key))
    return f"[{section}] {key}" + (f" (line {line})" if line else "")


def _key_lines(text: str) -> dict:
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section:
            out[(section, m.group(1).strip())] = n
    return out


def parse_config(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (trainer.K)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    lines = _key_lines(text)
    values = {s: {} for s in SECTIONS}
    for section in parser.sections():
        name = section.strip().lower()
        if name not in values:
            raise ConfigError(f"unknown section [{section}]")
        values[name].update(parser[section])
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, name = section.lower(), name.strip()
        if section not in values:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        values[section][name] = value
    unknown = set(values["task"]) - set(TASK_KEYS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{_where('task', key, lines)}: unknown key {key!r}")
    for key in ("vocab_size", "answer_len", "num_questions"):
        if key not in values["task"]:
            raise ConfigError(f"[task] missing required key {key!r}")
    # Normalise task values so that parse -> serialise -> parse is stable.
    task = {k: values["task"][k].strip() for k in TASK_KEYS if k in values["task"]}
    cfg = RunConfig(
        task=task,
        trainer=_build(TrainerConfig, values["trainer"], "trainer", lines),
        objective=_build(ObjectiveConfig, values["objective"], "objective", lines),
        output=_build(OutputConfig, values["output"], "output", lines),
    )
    try:
        cfg.build_task()
    except ConfigError:
        raise
    except ContractError as exc:
        raise ConfigError(f"[task] {exc}") from None
    return cfg


def load_config(path: str | os.PathLike, overrides: Iterable[str] = ()) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def serialize_config(cfg: RunConfig) -> str:
    out = ["[task]"]
    out += [f"{k} = {v}" for k, v in cfg.task.items()]
    for name in ("trainer", "objective", "output"):
        obj = getattr(cfg, name)
        out += ["", f"[{name}]"]
        out += [f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj) if f.init]
    return "\n".join(out) + "\n"
