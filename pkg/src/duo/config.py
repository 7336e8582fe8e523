"""Experiment configuration: one YAML document with every default embedded.

Values here are the calibrated toy-world settings.  The library dataclasses
keep their own defaults; this module is what the CLI and the acceptance
suite run.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .diffusion import NoiseSchedule, make_schedule
from .model import ModelConfig
from .pairgen import PairGenConfig
from .toyworld import WorldSpec, default_world, two_concept_world
from .unlearn import BaseTrainConfig, UnlearnConfig

ENV_OUT = "DUO_OUT"
WORLDS = {"default": default_world, "two_concept": two_concept_world}


class ConfigError(ValueError):
    """Raised with the dotted path of the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"config field '{path}': {message}")
        self.path = path


@dataclass
class ScheduleSection:
    kind: str = "cosine"
    T: int = 200
    params: dict = field(default_factory=lambda: {"power": 3.0})

    def build(self) -> NoiseSchedule:
        return make_schedule(self.kind, self.T, **self.params)


@dataclass
class AttackSection:
    n: int = 256
    # kept below the smallest distance between concept embeddings of a trained base (about 2.7)
    radii: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0])
    trials: int = 8
    probe_n: int = 64
    inversion_steps: int = 3000
    inversion_lr: float = 5e-3
    inversion_batch: int = 4
    n_exemplars: int = 1024


@dataclass
class SweepSection:
    labels: list = field(default_factory=lambda: [100, 250, 500, 1000, 2000])
    toy_beta_unit: float = 0.05          # toy beta = label * unit
    lambdas: list = field(default_factory=lambda: [1.0])
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1

    def betas(self) -> list[float]:
        return [float(label) * self.toy_beta_unit for label in self.labels]


@dataclass
class EvalSection:
    n: int = 256
    fd_seeds: list = field(default_factory=lambda: [11, 12, 13, 14])
    baseline_steps: int = 1500
    baseline_lr: float = 1e-2
    pair_bootstrap: int = 2000
    victim: str = ""                     # empty: the unlearn stage output


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = ""
    world: Any = "default"               # preset name, inline mapping, or path to a YAML file
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    base_train: BaseTrainConfig = field(default_factory=lambda: BaseTrainConfig(lr=2e-3))
    pairs: PairGenConfig = field(default_factory=lambda: PairGenConfig(guidance_scale=1.5))
    unlearn: UnlearnConfig = field(default_factory=lambda: UnlearnConfig(
        beta=5.0, beta_ref=5.0, base_lr=1e-3, steps=6000, decay_frac=0.3))
    attacks: AttackSection = field(default_factory=AttackSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---- derived objects ---------------------------------------------------
    def build_world(self) -> WorldSpec:
        w = self.world
        if isinstance(w, str) and w in WORLDS:
            return WORLDS[w]()
        if isinstance(w, str):
            p = Path(w)
            if not p.exists():
                raise ConfigError("world", f"unknown preset or missing file {w!r}")
            w = yaml.safe_load(p.read_text())
        if not isinstance(w, dict):
            raise ConfigError("world", "expected a preset name, a mapping or a file path")
        try:
            return WorldSpec.from_dict(w)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("world", str(exc)) from exc

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if isinstance(v, ModelConfig) else (
                asdict(v) if hasattr(v, "__dataclass_fields__") else copy.deepcopy(v))
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {"schedule": ScheduleSection, "base_train": BaseTrainConfig, "pairs": PairGenConfig,
            "unlearn": UnlearnConfig, "attacks": AttackSection, "sweep": SweepSection, "eval": EvalSection}


def _build_section(name: str, cls, default, raw) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    try:
        return replace(default, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    cfg = ExperimentConfig()
    top = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(key, "unknown field")
    updates: dict = {}
    for key, value in raw.items():
        if key in SECTIONS:
            updates[key] = _build_section(key, SECTIONS[key], getattr(cfg, key), value)
        elif key == "model":
            if not isinstance(value, dict):
                raise ConfigError("model", "expected a mapping")
            try:
                updates[key] = ModelConfig.from_dict({**cfg.model.to_dict(), **value})
            except TypeError as exc:
                raise ConfigError("model", str(exc)) from exc
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed", f"expected an integer, got {value!r}")
            updates[key] = value
        else:
            updates[key] = value
    cfg = replace(cfg, **updates)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.schedule.T < 2:
        raise ConfigError("schedule.T", "must be at least 2")
    if cfg.schedule.T != cfg.model.T:
        raise ConfigError("model.T", f"must equal schedule.T ({cfg.schedule.T})")
    if not 0.0 < cfg.pairs.t_edit_frac <= 1.0:
        raise ConfigError("pairs.t_edit_frac", "must lie in (0, 1]")
    if cfg.unlearn.conditioning not in ("unsafe", "paired"):
        raise ConfigError("unlearn.conditioning", "must be 'unsafe' or 'paired'")
    if not cfg.sweep.labels:
        raise ConfigError("sweep.labels", "must be nonempty")
    if cfg.sweep.toy_beta_unit <= 0:
        raise ConfigError("sweep.toy_beta_unit", "must be positive")
    if cfg.attacks.n < 1 or cfg.eval.n < 1:
        raise ConfigError("attacks.n" if cfg.attacks.n < 1 else "eval.n", "must be positive")
    world = cfg.build_world()
    if world.n_concepts != cfg.model.n_concepts:
        raise ConfigError("model.n_concepts", f"world has {world.n_concepts} concepts")


def load(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("<document>", "top level must be a mapping")
    return from_dict(raw)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.field=value`` strings; values are parsed as YAML scalars."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.field=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                raise ConfigError(".".join(parts[:i + 1]), "not a section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(key, "unknown field")
        node[parts[-1]] = yaml.safe_load(value)
    return from_dict(raw)
