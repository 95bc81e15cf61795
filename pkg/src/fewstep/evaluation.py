"""Sample-set metrics, oracle checks, conditioning accuracy and speedup measurement."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from . import autodiff as ad
from .datasets import PALETTE, CompositionSample, ToyDistribution, classify_regions, oracle_score, sample_labeled
from .networks import SeqCondition, as_array
from .packing import replace_target_with_noise, unpack_array
from .samplers import BASELINE_EULER_STEPS, FEW_STEPS, consistency_sample, euler_solve
from .schedule import interpolate, score_from_velocity


def random_directions(dim: int, n: int, seed) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal((n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == len(b):
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


def sliced_wasserstein(a, b, n_proj: int = 256, seed=0) -> float:
    """Mean 1-D W1 over seeded random unit projections."""
    a, b = np.atleast_2d(as_array(a)), np.atleast_2d(as_array(b))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dirs = random_directions(a.shape[1], n_proj, seed)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(n_proj)]))


def mmd_rbf(a, b, bandwidth: float = 1.0) -> float:
    """Unbiased MMD^2 with kernel exp(-|x - y|^2 / (2 bandwidth^2)); may dip below 0."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    a, b = np.atleast_2d(as_array(a)), np.atleast_2d(as_array(b))
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("MMD needs at least two samples per set")

    def gram(x, y):
        d2 = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2.0 * x @ y.T
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * bandwidth**2))

    kaa, kbb, kab = gram(a, a), gram(b, b), gram(a, b)
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def score_oracle_check(net, dist: ToyDistribution, n_probes: int = 2000, times=(0.25, 0.5, 0.75), seed=0, c=1) -> dict:
    """Relative RMS error of the net-implied score against the closed-form score, per t."""
    rng = np.random.default_rng(seed)
    errors = {}
    for t in times:
        x = sample_labeled(dist, n_probes, rng)[0]
        x_t = interpolate(x, rng.standard_normal(x.shape), t)
        with ad.no_grad():
            f = as_array(net(x_t, t, np.full(n_probes, c)))
        est = score_from_velocity(f, x_t, t)
        true = oracle_score(dist, x_t, t)
        errors[float(t)] = float(np.sqrt(np.sum((est - true) ** 2) / np.sum(true**2)))
    return {"per_t": errors, "max_rel_error": max(errors.values())}


# conditioning ----------------------------------------------------------------

Generator = Callable[[np.ndarray, SeqCondition], np.ndarray]


def consistency_generator(net, steps: int = FEW_STEPS, seed=0) -> Generator:
    def generate(noise, cond):
        return consistency_sample(net, noise, steps, cond, seed).samples

    return generate


def conditioning_accuracy(generate: Generator, samples: Sequence[CompositionSample], seed=0) -> dict:
    """Fraction of reference-owned target regions whose sampled colour matches.

    Target tokens are replaced by noise, references kept, then ``generate`` maps
    the noise to target tokens which are decoded and classified per region.
    """
    by_k: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_k.setdefault(s.k, []).append(i)
    correct_k, total_k = {}, {}
    for k, idx in sorted(by_k.items()):
        seqs = [samples[i].packed() for i in idx]
        noised = [replace_target_with_noise(q, (seed, i)) for q, i in zip(seqs, idx)]
        rows = seqs[0].target_rows
        noise = np.stack([q.tokens[rows] for q in noised])
        refs = np.stack([q.tokens[rows.stop :] for q in noised])
        cond = SeqCondition(refs, seqs[0].descriptors, np.array([samples[i].token for i in idx]))
        out = np.asarray(generate(noise, cond))
        d = seqs[0].descriptors[0]
        latents = unpack_array(out, d.height, d.width)
        correct = 0
        for lat, i in zip(latents, idx):
            pred = classify_regions(lat)
            correct += sum(int(pred[r] == colour) for r, colour in samples[i].attributes)
        correct_k[k] = correct
        total_k[k] = sum(samples[i].k for i in idx)
    total = sum(total_k.values())
    return {
        "accuracy": sum(correct_k.values()) / total,
        "per_k": {k: correct_k[k] / total_k[k] for k in correct_k},
        "chance": 1.0 / len(PALETTE),
        "regions": total,
    }


# speedup ---------------------------------------------------------------------


@dataclass
class SpeedupReport:
    euler_steps: int
    consistency_steps: int
    euler_nfe: int
    consistency_nfe: int
    nfe_ratio: float
    euler_wall_ns: int
    consistency_wall_ns: int
    wall_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("sampler", "steps", "nfe", "wall ms"),
            ("euler", self.euler_steps, self.euler_nfe, f"{self.euler_wall_ns / 1e6:.2f}"),
            ("consistency", self.consistency_steps, self.consistency_nfe, f"{self.consistency_wall_ns / 1e6:.2f}"),
        ]
        lines = [f"{a:<12} {b!s:>6} {c!s:>6} {d!s:>10}" for a, b, c, d in rows]
        lines.append(f"NFE ratio {self.nfe_ratio:.3f}   wall-clock ratio {self.wall_ratio:.2f}")
        return "\n".join(lines)


def speedup_report(teacher, student, shape: tuple[int, ...], c, seed=0,
                   euler_steps: int = BASELINE_EULER_STEPS, consistency_steps: int = FEW_STEPS,
                   repeats: int = 5) -> SpeedupReport:
    """Compare ``euler_steps`` Euler sampling with ``consistency_steps`` consistency sampling."""
    eps = np.random.default_rng(seed).standard_normal(shape)
    euler_times, cm_times = [], []
    for _ in range(repeats):
        e = euler_solve(teacher, eps, euler_steps, c)
        s = consistency_sample(student, eps, consistency_steps, c, seed)
        euler_times.append(e.wall_clock_ns)
        cm_times.append(s.wall_clock_ns)
    e_ns, s_ns = min(euler_times), min(cm_times)
    return SpeedupReport(euler_steps, consistency_steps, e.nfe, s.nfe, e.nfe / s.nfe, e_ns, s_ns, e_ns / s_ns)


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
