"""Experiment configuration: defaults, YAML files, environment overrides.

Precedence is defaults < YAML < VLCL_* environment variables. Nested
sections use a double underscore in the variable name, for example
VLCL_OPTIM__LR=0.002 or VLCL_ATTACK__N_ADV=5; top-level fields are plain
VLCL_EPOCHS=3. Unknown keys fail loudly.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attack import AttackConfig
from .bench import CONCEPTS, WARMUP_CONCEPT
from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimConfig

METHODS = (
    "apr",          # layered adapters + adversarial alignment to past depths
    "adapter",      # layered adapters, no alignment term
    "cft",          # dense fine-tuning of the shared blocks
    "cft-fh",       # dense fine-tuning, classifier frozen after the first task
    "cft-lp",       # classifier only, blocks stay at their warm-start values
    "l2",           # dense + squared-distance pull toward the last task's weights
    "ewc",          # dense + curvature-weighted pull
    "lwf",          # dense + distillation against a snapshot of the previous model
    "lwf-adapter",  # adapters + distillation against the previous depth
    "replay",       # dense + stored-example rehearsal
)

MAX_EPOCHS = 12

ENV_PREFIX = "VLCL_"


@dataclass
class ExperimentConfig:
    method: str = "apr"
    seed: int = 0                 # controls init, shuffling, attacks
    bench_seed: int = 100         # controls task data; fixed across methods
    tasks: list[str] = field(default_factory=lambda: [
        "color", "material", "size", "spatial-relation",
    ])
    n_triplets: int = 400         # scenes per task before the 80/10/10 split
    batch_size: int = 32
    epochs: int = 5               # per task, hard-capped at MAX_EPOCHS
    warmup_concept: str = WARMUP_CONCEPT
    warmup_triplets: int = 600
    warmup_epochs: int = 4
    rho: float = 0.2              # weight on the adversarial alignment terms
    dense_lr: float = 5e-4        # dense methods and warm-up use this rate
    l2_weight: float = 1.0
    ewc_weight: float = 50.0
    lwf_tau: float = 2.0
    lwf_weight: float = 1.0
    replay_capacity: int = 100
    eval_batch: int = 64
    f_n_variant: str = "max"       # "max" or "consecutive"; both appear in summaries
    divergence_loss: float = 30.0  # non-finite or above this aborts the run
    out_dir: str = "runs"
    save_checkpoints: bool = True
    cache_dir: str = "cache"      # warm-start checkpoints, keyed by seed
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.tasks:
            raise ConfigError("tasks must be a non-empty list")
        known = CONCEPTS + (WARMUP_CONCEPT,)
        for t in self.tasks:
            if t not in known:
                raise ConfigError(f"unknown task concept {t!r}; expected one of {known}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must be distinct")
        if not 1 <= self.epochs <= MAX_EPOCHS:
            raise ConfigError(f"epochs must be in [1, {MAX_EPOCHS}], got {self.epochs}")
        if not 0 <= self.warmup_epochs <= MAX_EPOCHS:
            raise ConfigError(f"warmup_epochs must be in [0, {MAX_EPOCHS}], got {self.warmup_epochs}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.n_triplets < 10 or self.warmup_triplets < 10:
            raise ConfigError("n_triplets and warmup_triplets must be at least 10")
        if self.rho < 0 or self.l2_weight < 0 or self.ewc_weight < 0 or self.lwf_weight < 0:
            raise ConfigError("penalty weights must be non-negative")
        if self.lwf_tau <= 0:
            raise ConfigError("lwf_tau must be positive")
        if self.replay_capacity < 0:
            raise ConfigError("replay_capacity must be >= 0")
        if self.f_n_variant not in ("max", "consecutive"):
            raise ConfigError(f"f_n_variant must be 'max' or 'consecutive', got {self.f_n_variant!r}")
        if self.dense_lr <= 0:
            raise ConfigError("dense_lr must be positive")
        if self.divergence_loss <= 0:
            raise ConfigError("divergence_loss must be positive")
        self.model.validate()
        self.optim.validate()
        self.attack.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out


def _coerce(raw: str, kind, name: str):
    try:
        if kind is bool or kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if kind is str or kind == "str":
            return raw
        if str(kind).startswith("list"):
            return [part.strip() for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for option {name}") from None
    raise ConfigError(f"option {name} has unsupported type {kind}")


_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "attack": AttackConfig}


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _apply_mapping(cfg: ExperimentConfig, mapping: dict, source: str) -> None:
    top_types = _field_types(ExperimentConfig)
    for key, value in mapping.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: section {key!r} must be a mapping")
            sub = getattr(cfg, key)
            sub_types = _field_types(type(sub))
            for sub_key, sub_value in value.items():
                if sub_key not in sub_types:
                    raise ConfigError(f"{source}: unknown option {key}.{sub_key}")
                setattr(sub, sub_key, sub_value)
        elif key in top_types:
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"{source}: unknown option {key!r}")


def _apply_env(cfg: ExperimentConfig, environ: dict[str, str]) -> None:
    top_types = _field_types(ExperimentConfig)
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        spec = name[len(ENV_PREFIX):].lower()
        if "__" in spec:
            section, _, fname = spec.partition("__")
            if section not in _SECTIONS:
                raise ConfigError(f"{name}: unknown section {section!r}")
            sub = getattr(cfg, section)
            sub_types = _field_types(type(sub))
            if fname not in sub_types:
                raise ConfigError(f"{name}: unknown option {section}.{fname}")
            setattr(sub, fname, _coerce(raw, sub_types[fname], name))
        else:
            if spec not in top_types:
                raise ConfigError(f"{name}: unknown option {spec!r}")
            setattr(cfg, spec, _coerce(raw, top_types[spec], name))


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                environ: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a validated config from defaults, an optional YAML file,
    programmatic overrides, and VLCL_* variables, in that order."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        try:
            mapping = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _apply_mapping(cfg, mapping, str(path))
    if overrides:
        _apply_mapping(cfg, overrides, "overrides")
    _apply_env(cfg, os.environ if environ is None else environ)
    cfg.validate()
    return cfg
