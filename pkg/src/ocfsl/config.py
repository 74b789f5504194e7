"""Experiment configuration: one JSON document with dot-path overrides."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .learners import LearnerConfig
from .sequences import SCHEMA_VERSION, SamplerConfig, derive_seed
from .training import TrainConfig

OVERRIDE_ENV = "OCFSL_SET"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_sequences: int = 500
    batch_size: int = 16

    def __post_init__(self):
        if self.n_sequences < 1 or self.batch_size < 1:
            raise ValueError("n_sequences and batch_size must be >= 1")


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    learners: tuple = ("cpm", "opn")

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "learners", tuple(self.learners))


_SECTIONS = {"sampler": SamplerConfig, "learner": LearnerConfig, "train": TrainConfig,
             "eval": EvalConfig, "ablation": AblationConfig}


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/default"
    ablate: tuple = ()
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        object.__setattr__(self, "ablate", tuple(self.ablate))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported "
                              f"(expected {SCHEMA_VERSION})")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self):
        """Digest of everything that determines results; the output location is excluded."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in _SECTIONS:
                kw[k] = _build_section(k, v)
            else:
                kw[k] = v
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    # seeds ----------------------------------------------------------------
    def stream(self, name, seed=None):
        """Independent seed for a named consumer (sampler, init, train, ramp, eval)."""
        return derive_seed(self.seed if seed is None else seed, name)

    def resolved_learner(self):
        return self.learner.with_ablations(self.ablate)


def _build_section(name, value):
    cls = _SECTIONS[name]
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``dot.path=value`` strings; values are parsed as JSON when possible."""
    d = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, _, raw = item.partition("=")
        keys = path.strip().split(".")
        node = d
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"override {path!r}: {k!r} is not a config section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"override {path!r}: unknown key")
        node[keys[-1]] = _parse_value(raw.strip())
    return ExperimentConfig.from_dict(d)


def env_overrides(environ=None):
    text = (environ if environ is not None else os.environ).get(OVERRIDE_ENV, "")
    return [s for s in (p.strip() for p in text.split(";")) if s]


def load_config(path=None, overrides=(), environ=None) -> ExperimentConfig:
    """Defaults, then the JSON file, then ``OCFSL_SET``, then explicit overrides."""
    if path:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        config = ExperimentConfig.from_dict(d)
    else:
        config = ExperimentConfig()
    return apply_overrides(config, [*env_overrides(environ), *overrides])


def desk_config(**changes) -> ExperimentConfig:
    """Small toy setting that trains in about a minute per run on one core."""
    base = ExperimentConfig(
        sampler=SamplerConfig(seq_len=80, n_envs=4),
        learner=LearnerConfig(embed_dim=16, encoder_hidden=(32,), lstm_hidden=32),
        train=TrainConfig(steps=600, lr=5e-3, milestones=(400, 500), val_every=150,
                          val_sequences=32, ramp_interval=60),
        eval=EvalConfig(n_sequences=200),
    )
    return replace(base, **changes)


__all__ = ["AblationConfig", "ConfigError", "EvalConfig", "ExperimentConfig", "OVERRIDE_ENV",
           "apply_overrides", "desk_config", "env_overrides", "load_config"]
