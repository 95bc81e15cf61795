"""Run configuration: a YAML mapping validated against a fixed schema.

Top-level keys (``seed`` is mandatory, everything else has a default)::

    task: train-teacher | distill-cm | distill-dmd | sample | eval | pack-demo
    seed: 0
    out: runs/demo
    dataset: {kind, dim, means, weights, std, noise, conditional, cfg_dropout,
              k_min, k_max, size}
    net:     {hidden, depth, time_dim, pos_dim}
    optim:   {lr, beta1, beta2, eps, weight_decay, cosine}
    teacher: {steps, batch}
    cm:      {steps, batch, lr, fd_epsilon, ema_decay, tangent_clip}
    dmd:     {steps, batch, cfg_scale, update_ratio, generator_steps, lr,
              fake_lr_ratio, t_min, t_max, fake_warmup}
    sample:  {steps, n, sampler, checkpoint, cfg_scale}
    eval:    {n, n_proj, euler_steps, consistency_steps, repeats}
    checkpoints: {teacher, cm, dmd}

Unknown keys at any level are rejected by name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datasets import KINDS as TOY_KINDS

TASKS = ("train-teacher", "distill-cm", "distill-dmd", "sample", "eval", "pack-demo")
DATASET_KINDS = TOY_KINDS + ("composition",)


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "two-moons"
    dim: int = 2
    means: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    std: float = 1.0
    noise: float = 0.1
    conditional: bool = False
    cfg_dropout: float = 0.1
    k_min: int = 2
    k_max: int = 3
    size: int = 2000


@dataclass
class NetSection:
    hidden: int = 128
    depth: int = 3
    time_dim: int = 16
    pos_dim: int = 8


@dataclass
class OptimSection:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    cosine: bool = True


@dataclass
class TeacherSection:
    steps: int = 20_000
    batch: int = 256


@dataclass
class CmSection:
    steps: int = 2_000
    batch: int = 1_024
    lr: float = 1e-4
    fd_epsilon: float = 5e-3
    ema_decay: float = 0.0
    tangent_clip: float | None = 100.0


@dataclass
class DmdSection:
    steps: int = 300
    batch: int = 256
    cfg_scale: float = 6.0
    update_ratio: int = 5
    generator_steps: int = 8
    lr: float = 1e-5
    fake_lr_ratio: float = 0.2
    t_min: float = 0.02
    t_max: float = 0.98
    fake_warmup: int = 0


@dataclass
class SampleSection:
    steps: int = 8
    n: int = 2000
    sampler: str = "consistency"
    checkpoint: str | None = None
    cfg_scale: float = 1.0


@dataclass
class EvalSection:
    n: int = 2000
    n_proj: int = 256
    euler_steps: int = 100
    consistency_steps: int = 8
    repeats: int = 5


@dataclass
class CheckpointSection:
    teacher: str | None = None
    cm: str | None = None
    dmd: str | None = None


@dataclass
class RunConfig:
    seed: int
    task: str | None = None
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    net: NetSection = field(default_factory=NetSection)
    optim: OptimSection = field(default_factory=OptimSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    cm: CmSection = field(default_factory=CmSection)
    dmd: DmdSection = field(default_factory=DmdSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    checkpoints: CheckpointSection = field(default_factory=CheckpointSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (output locations excluded)."""
        d = self.to_dict()
        for key in ("out", "checkpoints", "task"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig) if f.default_factory is not dataclasses.MISSING}


def _coerce(section: str, name: str, value: Any, default: Any):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{name} must be true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{name} must be a number, got {value!r}")
        return float(value)
    return value


def _build_section(name: str, raw: Any):
    factory = _SECTIONS[name]
    base = factory()
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(base)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        setattr(base, key, _coerce(name, key, value, getattr(base, key)))
    return base


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {key}")
    if raw.get("seed") is None:
        raise ConfigError("seed is mandatory")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    cfg = RunConfig(seed=seed)
    if raw.get("task") is not None:
        cfg.task = raw["task"]
    if raw.get("out") is not None:
        cfg.out = str(raw["out"])
    for name in _SECTIONS:
        setattr(cfg, name, _build_section(name, raw.get(name)))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.task is not None and cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}; expected one of {TASKS}")
    if cfg.dataset.kind not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind {cfg.dataset.kind!r}")
    if not 0.0 <= cfg.dataset.cfg_dropout < 1.0:
        raise ConfigError("dataset.cfg_dropout must lie in [0, 1)")
    if not 1 <= cfg.dataset.k_min <= cfg.dataset.k_max <= 6:
        raise ConfigError("dataset.k_min/k_max must satisfy 1 <= k_min <= k_max <= 6")
    for sec, keys in (("teacher", ("steps", "batch")), ("cm", ("steps", "batch")),
                      ("dmd", ("steps", "batch", "update_ratio", "generator_steps")),
                      ("sample", ("steps", "n")), ("eval", ("n", "n_proj", "euler_steps",
                                                           "consistency_steps", "repeats"))):
        for k in keys:
            if getattr(getattr(cfg, sec), k) < 1:
                raise ConfigError(f"{sec}.{k} must be >= 1")
    if cfg.optim.lr <= 0 or cfg.cm.lr <= 0 or cfg.dmd.lr <= 0:
        raise ConfigError("learning rates must be positive")
    if not (0 <= cfg.optim.beta1 < 1 and 0 <= cfg.optim.beta2 < 1):
        raise ConfigError("optim betas must lie in [0, 1)")
    if cfg.dmd.cfg_scale < 1.0 or cfg.sample.cfg_scale < 1.0:
        raise ConfigError("cfg_scale must be >= 1")
    if not 0 < cfg.cm.fd_epsilon < 0.5:
        raise ConfigError("cm.fd_epsilon must lie in (0, 0.5)")
    if cfg.sample.sampler not in ("consistency", "euler"):
        raise ConfigError(f"unknown sampler {cfg.sample.sampler!r}")


def parse_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return config_from_dict(raw or {})
