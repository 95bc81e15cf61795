"""Shared training plumbing: optimizer config, cosine schedule, batch sources, loss logs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import CompositionSample, ToyDistribution, sample_labeled
from .networks import NULL_TOKEN, SeqCondition
from .packing import pack_array


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or parameter."""


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    cosine: bool = True


def cosine_lr(lr0: float, step: int, total: int) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def lr_at(opt: OptimConfig, step: int, total: int) -> float:
    return cosine_lr(opt.lr, step, total) if opt.cosine else opt.lr


class ToySource:
    """Batches of toy points with condition ids (1 + class label when conditional)."""

    def __init__(self, dist: ToyDistribution, conditional: bool = False, cfg_dropout: float = 0.0):
        self.dist = dist
        self.conditional = conditional
        self.cfg_dropout = cfg_dropout

    @property
    def vocab(self) -> int:
        return 1 + (self.dist.num_classes if self.conditional else 1)

    @property
    def data_shape(self) -> tuple[int, ...]:
        return (self.dist.dim,)

    def conditions(self, labels: np.ndarray) -> np.ndarray:
        return labels + 1 if self.conditional else np.ones_like(labels)

    def sample(self, rng: np.random.Generator, batch: int, drop: bool = True):
        x, labels = sample_labeled(self.dist, batch, rng)
        c = self.conditions(labels)
        if drop and self.cfg_dropout > 0:
            c = np.where(rng.random(batch) < self.cfg_dropout, NULL_TOKEN, c)
        return x, c


class CompositionSource:
    """Batches of packed composition targets; each batch shares one K (one layout)."""

    def __init__(self, samples: Sequence[CompositionSample], cfg_dropout: float = 0.0):
        if not samples:
            raise ValueError("empty composition dataset")
        self.cfg_dropout = cfg_dropout
        groups: dict[int, list[CompositionSample]] = {}
        for s in samples:
            groups.setdefault(s.k, []).append(s)
        self.ks = sorted(groups)
        self.targets = {}
        self.refs = {}
        self.descs = {}
        self.tokens = {}
        for k in self.ks:
            g = groups[k]
            seq0 = g[0].packed()
            self.descs[k] = seq0.descriptors
            self.targets[k] = np.stack([pack_array(s.target.values) for s in g])
            self.refs[k] = np.stack(
                [np.concatenate([pack_array(r.values) for r in s.refs], axis=0) for s in g]
            )
            self.tokens[k] = np.array([s.token for s in g], dtype=np.int64)
        self.dim = self.targets[self.ks[0]].shape[-1]

    @property
    def vocab(self) -> int:
        return 2

    def sample(self, rng: np.random.Generator, batch: int, drop: bool = True):
        k = self.ks[int(rng.integers(len(self.ks)))]
        idx = rng.integers(0, len(self.targets[k]), size=batch)
        tok = self.tokens[k][idx]
        if drop and self.cfg_dropout > 0:
            tok = np.where(rng.random(batch) < self.cfg_dropout, NULL_TOKEN, tok)
        return self.targets[k][idx], SeqCondition(self.refs[k][idx], self.descs[k], tok)


@dataclass
class LossLog:
    columns: tuple[str, ...] = ("step", "loss")
    rows: list[tuple] = field(default_factory=list)

    def append(self, *values) -> None:
        self.rows.append(tuple(values))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in r])


def check_loss(value: float, step: int, log: LossLog) -> None:
    if not math.isfinite(value):
        tail = log.rows[-5:]
        raise TrainingError(f"non-finite loss at step {step}; last logged rows: {tail}")
