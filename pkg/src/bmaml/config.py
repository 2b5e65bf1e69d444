"""Experiment configuration: JSON files plus ``key=value`` overrides.

Schema (all keys optional; defaults below)::

    {
      "algo": "bmaml",            # maml | emaml | bfa | bmaml | svpg-chaser | vpg-reptile
      "suite": "sinusoid",        # sinusoid | synth-class | nav2d | active
      "seed": 0,
      "task_count": 100,          # |T| training tasks (supervised suites)
      "K": 5,                     # shots per class / points per task split
      "iterations": null,         # meta-iterations; null derives it from epochs
      "epochs": null,             # passes over the task set; null uses the default below
      "eval_interval": 250,
      "eval_tasks": 200,
      "output_dir": "runs/default",
      "wall_clock": false,        # write real wall_ms instead of 0
      "meta": {...MetaConfig...},
      "rl": {...RlMetaConfig...},
      "classification": {...ClassificationConfig...}
    }

Overrides address nested fields with dots (``meta.inner_lr=0.02``); values
are parsed as JSON when possible, otherwise kept as strings.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .meta import ALGORITHMS, MetaConfig
from .metarl import RL_ALGORITHMS, RlMetaConfig
from .models import HyperpriorConfig

SUITES = ("sinusoid", "synth-class", "nav2d", "active")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass
class ClassificationConfig:
    ways: int = 5
    pool_size: int = 20  # unlabeled pool per task
    input_dim: int = 8
    hidden: tuple[int, ...] = (40, 40)
    mean_scale: float = 3.0
    cluster_var: float = 0.5
    n_test_per_class: int = 20
    prior_shape: float = 2.0  # a, Appendix A.2
    prior_rate: float = 0.2  # b, Appendix A.2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = {
            "ways": self.ways >= 2,
            "pool_size": self.pool_size >= 1,
            "input_dim": self.input_dim >= 1,
            "hidden": all(h >= 1 for h in self.hidden),
            "mean_scale": self.mean_scale > 0,
            "cluster_var": self.cluster_var > 0,
            "n_test_per_class": self.n_test_per_class >= 1,
            "prior_shape": self.prior_shape > 0,
            "prior_rate": self.prior_rate > 0,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid ClassificationConfig field(s): {', '.join(bad)}")

    def hyperprior(self) -> HyperpriorConfig:
        return HyperpriorConfig.classification(self.prior_shape, self.prior_rate)


def default_epochs(task_count: int) -> int:
    # 10000 epochs for |T|=100 and 1000 for |T|=1000, Appendix A.1
    return 10000 if task_count <= 100 else 1000


@dataclass
class ExperimentConfig:
    algo: str = "bmaml"
    suite: str = "sinusoid"
    seed: int = 0
    task_count: int = 100  # |T|, Appendix A.1
    K: int = 5  # shots, Appendix A.1
    iterations: int | None = None
    epochs: int | None = None
    eval_interval: int = 250
    eval_tasks: int = 200
    n_test: int = 100
    output_dir: str = "runs/default"
    wall_clock: bool = False
    meta: MetaConfig = field(default_factory=MetaConfig)
    rl: RlMetaConfig = field(default_factory=RlMetaConfig)
    classification: ClassificationConfig = field(default_factory=ClassificationConfig)

    def __post_init__(self):
        if self.algo not in ALGORITHMS + RL_ALGORITHMS:
            raise ConfigError(f"algo: unknown algorithm {self.algo!r}")
        if self.suite not in SUITES:
            raise ConfigError(f"suite: unknown suite {self.suite!r}")
        rl_algo = self.algo in RL_ALGORITHMS
        if rl_algo != (self.suite == "nav2d"):
            raise ConfigError(f"algo: {self.algo!r} is incompatible with suite {self.suite!r}")
        for name, ok in {
            "seed": isinstance(self.seed, int) and self.seed >= 0,
            "task_count": self.task_count >= 1,
            "K": self.K >= 1,
            "iterations": self.iterations is None or self.iterations >= 1,
            "epochs": self.epochs is None or self.epochs >= 1,
            "eval_interval": self.eval_interval >= 1,
            "eval_tasks": self.eval_tasks >= 1,
            "n_test": self.n_test >= 1,
        }.items():
            if not ok:
                raise ConfigError(f"{name}: invalid value {getattr(self, name)!r}")
        if self.algo == "maml" and self.meta.num_particles != 1:
            raise ConfigError("meta.num_particles: maml uses exactly one particle")

    @property
    def is_rl(self) -> bool:
        return self.suite == "nav2d"

    @property
    def total_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        if self.is_rl:
            return self.rl.meta_iterations
        epochs = self.epochs or default_epochs(self.task_count)
        return epochs * math.ceil(self.task_count / self.meta.meta_batch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"meta": MetaConfig, "rl": RlMetaConfig, "classification": ClassificationConfig}


def _build_section(name: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{name}: {err}") from err


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    if raw.get("algo") == "maml":
        raw.setdefault("meta", {})
        raw["meta"] = {"num_particles": 1, **raw["meta"]}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    for name, cls in _SECTIONS.items():
        if name in raw:
            raw[name] = _build_section(name, cls, raw[name])
    try:
        return ExperimentConfig(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key=value")
        *parents, leaf = key.split(".")
        node = raw
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a section")
        node[leaf] = parse_value(value)
    return raw


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"config file {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    return from_dict(apply_overrides(raw, overrides))
