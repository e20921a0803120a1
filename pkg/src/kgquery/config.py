"""Run configuration: one INI file plus ``section.key=value`` overrides.

Sections and keys mirror the dataclasses below; every key is optional::

    [run]
    seed = 0
    graph = work/graph          # prefix of the three graph files
    data_dir = work/data
    out_dir = work/run

    [synth]    entities, relations, triples, types, noise
    [split]    mode, edge_holdout, entity_partition, fewshot_count
    [data]     train_per_type, valid_per_type, test_per_type, extra_structures
    [model]    dim, blocks, heads, max_length, maxout_pieces, init_std, union_init
    [train]    every TrainConfig field (temperature, lam, lr, epochs, ...)
    [eval]     vocab_mode, init_checkpoint
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from kgquery.datasets import SplitSpec
from kgquery.errors import ConfigError
from kgquery.training import TrainConfig


@dataclass
class RunSection:
    seed: int = 0
    graph: str = "graph"
    target_graph: str = ""  # cross-KG few-shot target
    data_dir: str = "data"
    out_dir: str = "run"


@dataclass
class SynthSection:
    entities: int = 200
    relations: int = 8
    triples: int = 1500
    types: int = 10
    noise: float = 0.2


@dataclass
class DataSection:
    train_per_type: int = 500
    valid_per_type: int = 20
    test_per_type: int = 100
    extra_structures: bool = False


@dataclass
class ModelSection:
    dim: int = 64
    blocks: int = 2
    heads: int = 4
    max_length: int = 128
    maxout_pieces: int = 2
    init_std: float = 0.02
    union_init: str = "identity"


@dataclass
class EvalSection:
    vocab_mode: str = "unk"  # unseen name words: "unk" or "extend"
    init_checkpoint: str = ""  # continue training from this checkpoint (few-shot transfer)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthSection = field(default_factory=SynthSection)
    split: SplitSpec = field(default_factory=SplitSpec)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.run.out_dir) / "model.ckpt"

    def check(self) -> None:
        if self.eval.vocab_mode not in ("unk", "extend"):
            raise ConfigError("eval.vocab_mode must be 'unk' or 'extend'")
        if self.model.dim % self.model.heads:
            raise ConfigError(f"model.dim {self.model.dim} is not divisible by model.heads {self.model.heads}")
        if self.model.union_init not in ("identity", "normal"):
            raise ConfigError("model.union_init must be 'identity' or 'normal'")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            parser[f.name] = {k: str(v) for k, v in dataclasses.asdict(section).items()}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in parser[name].items())
            lines.append("")
        return "\n".join(lines)


_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


def _coerce(value: str, default, where: str):
    try:
        if isinstance(default, bool):
            if value.lower() not in _BOOLEANS:
                raise ValueError(value)
            return _BOOLEANS[value.lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {value!r} as {type(default).__name__}") from None
    return value


def _apply(values: dict, key_values: Iterable[tuple[str, str, str]]) -> None:
    for section, key, raw in key_values:
        if section not in values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(raw.strip(), values[section][key], f"{section}.{key}")


def parse_override(text: str) -> tuple[str, str, str]:
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return section, key, value


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path`` (if given), then ``section.key=value`` overrides."""
    defaults = RunConfig()
    values = {f.name: dataclasses.asdict(getattr(defaults, f.name)) for f in dataclasses.fields(defaults)}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from None
        _apply(values, ((s, k, v) for s in parser.sections() for k, v in parser[s].items()))
    _apply(values, (parse_override(o) for o in overrides))
    try:
        config = RunConfig(
            run=RunSection(**values["run"]),
            synth=SynthSection(**values["synth"]),
            split=SplitSpec(**values["split"]),
            data=DataSection(**values["data"]),
            model=ModelSection(**values["model"]),
            train=TrainConfig(**values["train"]),
            eval=EvalSection(**values["eval"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    config.check()
    return config


def with_overrides(config: RunConfig, **sections) -> RunConfig:
    """Copy of ``config`` with ``section={key: value}`` replacements (used by tests and scripts)."""
    out = {}
    for f in dataclasses.fields(config):
        section = getattr(config, f.name)
        out[f.name] = dataclasses.replace(section, **sections.get(f.name, {}))
    return RunConfig(**out)
