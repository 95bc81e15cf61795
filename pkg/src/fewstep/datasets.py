"""Toy data sources with closed-form oracles, plus the synthetic composition task.

Composition task: each reference image is a grey canvas with one region
painted in one palette colour. The target paints every reference's region
with that reference's colour, so the target is a pure function of the
references and a model can only get it right by reading them.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .autodiff import Tensor
from .packing import (
    LatentGrid,
    UnifiedSequence,
    build_unified,
    dump_sequences,
    load_sequences,
    pack,
    unpack,
)

KINDS = ("standard-gaussian", "gaussian-mixture", "two-moons", "checkerboard")


@dataclass(frozen=True)
class ToyDistribution:
    kind: str = "standard-gaussian"
    dim: int = 2
    means: tuple = ()  # mixture component means, each of length dim
    weights: tuple = ()
    std: float = 1.0  # isotropic component std for mixtures
    noise: float = 0.1  # two-moons jitter

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution {self.kind!r}")
        if self.kind in ("two-moons", "checkerboard") and self.dim != 2:
            raise ValueError(f"{self.kind} is 2-D")
        if self.kind == "gaussian-mixture":
            means = np.asarray(self.means, dtype=np.float64)
            w = np.asarray(self.weights, dtype=np.float64)
            if means.ndim != 2 or means.shape[1] != self.dim or len(w) != len(means):
                raise ValueError("mixture needs K means of length dim and K weights")
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
                raise ValueError("mixture weights must be non-negative and sum to 1")
            if self.std <= 0:
                raise ValueError("mixture std must be positive")

    @property
    def mean_array(self) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64).reshape(-1, self.dim)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        if self.kind == "gaussian-mixture":
            return len(self.weights)
        return 2 if self.kind == "two-moons" else 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "means": [list(m) for m in self.means],
            "weights": list(self.weights),
            "std": self.std,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDistribution":
        d = dict(d)
        d["means"] = tuple(tuple(float(v) for v in m) for m in d.get("means", ()))
        d["weights"] = tuple(float(v) for v in d.get("weights", ()))
        return cls(**d)


def two_gaussian_1d(separation: float = 1.5, std: float = 0.5) -> ToyDistribution:
    return ToyDistribution(
        "gaussian-mixture", dim=1, means=((-separation,), (separation,)), weights=(0.5, 0.5), std=std
    )


def sample_labeled(dist: ToyDistribution, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points and their class labels (component / moon index, else 0)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if dist.kind == "standard-gaussian":
        return rng.standard_normal((n, dist.dim)), np.zeros(n, dtype=np.int64)
    if dist.kind == "gaussian-mixture":
        labels = rng.choice(len(dist.weights), size=n, p=dist.weight_array)
        x = dist.mean_array[labels] + dist.std * rng.standard_normal((n, dist.dim))
        return x, labels.astype(np.int64)
    if dist.kind == "two-moons":
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower)
        x = x + dist.noise * rng.standard_normal((n, 2))
        x = (x - np.array([0.5, 0.25])) * np.array([1.0, 2.0])
        return x, labels.astype(np.int64)
    # checkerboard on [-2, 2]^2, cells with even floor(x) + floor(y)
    x0 = rng.uniform(-2.0, 2.0, size=n)
    col = np.floor(x0)
    row = rng.integers(0, 2, size=n) * 2 + (col.astype(np.int64) % 2) - 2
    x1 = row + rng.uniform(0.0, 1.0, size=n)
    return np.stack([x0, x1], axis=1), np.zeros(n, dtype=np.int64)


def sample_data(dist: ToyDistribution, n: int, seed) -> np.ndarray:
    return sample_labeled(dist, n, np.random.default_rng(seed))[0]


def in_checkerboard(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    inside = np.all((x >= -2.0) & (x < 2.0), axis=1)
    cell = np.floor(x[:, 0]).astype(np.int64) + np.floor(x[:, 1]).astype(np.int64)
    return inside & (cell % 2 == 0)


def _components(dist: ToyDistribution):
    if dist.kind == "standard-gaussian":
        return np.zeros((1, dist.dim)), np.ones(1), 1.0
    if dist.kind == "gaussian-mixture":
        return dist.mean_array, dist.weight_array, dist.std
    raise ValueError(f"no closed-form oracle for {dist.kind!r}")


def _posterior(dist: ToyDistribution, x_t: np.ndarray, t):
    means, weights, s = _components(dist)
    x_t = np.asarray(x_t, dtype=np.float64)
    n = x_t.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).reshape(n, 1, 1)
    var = (1.0 - tt) ** 2 * s * s + tt * tt  # per-component marginal variance
    centred = x_t[:, None, :] - (1.0 - tt) * means[None, :, :]
    logp = -0.5 * np.sum(centred**2, axis=2) / var[:, :, 0]
    logp = logp - 0.5 * dist.dim * np.log(2 * np.pi * var[:, :, 0])
    with np.errstate(divide="ignore"):
        logp = logp + np.log(weights)[None, :]
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return means, s, tt, var, centred, resp


def oracle_velocity(dist: ToyDistribution, x_t: np.ndarray, t) -> np.ndarray:
    """E[eps - x | x_t] for Gaussian / isotropic Gaussian-mixture data."""
    means, s, tt, var, centred, resp = _posterior(dist, x_t, t)
    v_k = (tt - (1.0 - tt) * s * s) / var * centred - means[None, :, :]
    return np.sum(resp[:, :, None] * v_k, axis=1)


def oracle_score(dist: ToyDistribution, x_t: np.ndarray, t) -> np.ndarray:
    """Marginal score of x_t."""
    _, _, _, var, centred, resp = _posterior(dist, x_t, t)
    return np.sum(resp[:, :, None] * (-centred / var), axis=1)


class OracleNet:
    """Wraps ``oracle_velocity`` behind the velocity-net call signature."""

    def __init__(self, dist: ToyDistribution):
        self.dist = dist
        self.calls = 0

    def __call__(self, x_t, t, c=None):
        self.calls += 1
        x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
        return Tensor(oracle_velocity(self.dist, x, t))


# toy encoder ---------------------------------------------------------------


def toy_encode(image: np.ndarray) -> np.ndarray:
    """(..., C, H, W) image -> (..., C+1, H/2, W/2): 2x average pool plus a luminance channel."""
    img = np.asarray(image, dtype=np.float64)
    *lead, c, h, w = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dims must be even, got {h}x{w}")
    pooled = img.reshape(*lead, c, h // 2, 2, w // 2, 2).mean(axis=(-1, -3))
    lum = pooled.mean(axis=-3, keepdims=True)
    return np.concatenate([pooled, lum], axis=-3)


def toy_decode(latent: np.ndarray) -> np.ndarray:
    """Drop the luminance channel and nearest-neighbour upsample 2x."""
    z = np.asarray(latent, dtype=np.float64)[..., :-1, :, :]
    return np.repeat(np.repeat(z, 2, axis=-2), 2, axis=-1)


def encode_grid(image: np.ndarray) -> LatentGrid:
    return LatentGrid(toy_encode(image))


def psnr(a: np.ndarray, b: np.ndarray, peak: float | None = None) -> float:
    a, b = np.asarray(a), np.asarray(b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return float("inf")
    peak = float(np.max(np.abs(a))) if peak is None else peak
    return float(10.0 * np.log10(peak * peak / err))


# composition task ------------------------------------------------------------

PALETTE = np.array(
    [[sr, sg, sb] for sr in (-1.0, 1.0) for sg in (-1.0, 1.0) for sb in (-1.0, 1.0)]
)
BACKGROUND = np.zeros(3)
REGION_ROWS, REGION_COLS = 2, 3
NUM_REGIONS = REGION_ROWS * REGION_COLS
REGION_PIXELS = 4  # each region is a 4x4 pixel block -> one packed token
IMAGE_SHAPE = (3, REGION_ROWS * REGION_PIXELS, REGION_COLS * REGION_PIXELS)
COMPOSE_TOKEN = 1


class ConflictError(ValueError):
    """Two references claim the same target region."""


def region_slices(region: int) -> tuple[slice, slice]:
    r, c = divmod(region, REGION_COLS)
    return (
        slice(r * REGION_PIXELS, (r + 1) * REGION_PIXELS),
        slice(c * REGION_PIXELS, (c + 1) * REGION_PIXELS),
    )


def paint(attributes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Canvas with each ``(region, colour)`` painted; later never overwrites earlier."""
    img = np.broadcast_to(BACKGROUND[:, None, None], IMAGE_SHAPE).copy()
    for region, colour in attributes:
        rs, cs = region_slices(region)
        img[:, rs, cs] = PALETTE[colour][:, None, None]
    return img


def compose_target(attributes: Sequence[tuple[int, int]]) -> np.ndarray:
    regions = [r for r, _ in attributes]
    dup = [r for r, n in Counter(regions).items() if n > 1]
    if dup:
        raise ConflictError(f"references conflict on region(s) {sorted(dup)}")
    if any(not 0 <= r < NUM_REGIONS for r in regions):
        raise ValueError("region index out of range")
    return paint(attributes)


@dataclass(frozen=True)
class CompositionSample:
    refs: tuple[LatentGrid, ...]
    target: LatentGrid
    attributes: tuple[tuple[int, int], ...]  # (region, colour) per reference
    token: int = COMPOSE_TOKEN

    @property
    def k(self) -> int:
        return len(self.refs)

    def packed(self) -> UnifiedSequence:
        return build_unified(pack(self.target), [pack(r) for r in self.refs])


def make_sample(attributes: Sequence[tuple[int, int]]) -> CompositionSample:
    attributes = tuple((int(r), int(c)) for r, c in attributes)
    if not 1 <= len(attributes) <= NUM_REGIONS:
        raise ValueError(f"K must lie in [1, {NUM_REGIONS}]")
    target = encode_grid(compose_target(attributes))
    refs = tuple(encode_grid(paint([a])) for a in attributes)
    return CompositionSample(refs, target, attributes)


def make_composition_dataset(k_range: Sequence[int] | tuple[int, int], n: int, seed) -> list[CompositionSample]:
    """``n`` samples with K drawn uniformly from the inclusive ``k_range``."""
    lo, hi = (k_range, k_range) if np.isscalar(k_range) else tuple(k_range)
    if not 1 <= lo <= hi <= NUM_REGIONS:
        raise ValueError(f"K range {k_range} outside [1, {NUM_REGIONS}]")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(lo, hi + 1))
        regions = rng.permutation(NUM_REGIONS)[:k]
        colours = rng.integers(0, len(PALETTE), size=k)
        out.append(make_sample(list(zip(regions, colours))))
    return out


def classify_regions(latent: np.ndarray) -> np.ndarray:
    """Nearest palette colour (or -1 for background) per region of a decoded latent."""
    img = toy_decode(latent)
    labels = np.empty(NUM_REGIONS, dtype=np.int64)
    choices = np.vstack([PALETTE, BACKGROUND])
    for region in range(NUM_REGIONS):
        rs, cs = region_slices(region)
        mean = img[:, rs, cs].mean(axis=(1, 2))
        idx = int(np.argmin(np.sum((choices - mean) ** 2, axis=1)))
        labels[region] = -1 if idx == len(PALETTE) else idx
    return labels


def dump_composition_dataset(directory: str | Path, samples: Sequence[CompositionSample], seed) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_sequences(directory / "sequences.ups", [s.packed() for s in samples])
    manifest = {
        "count": len(samples),
        "k_distribution": {str(k): v for k, v in sorted(Counter(s.k for s in samples).items())},
        "seed": seed,
        "attributes": [[list(a) for a in s.attributes] for s in samples],
        "tokens": [s.token for s in samples],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_composition_dataset(directory: str | Path) -> list[CompositionSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    seqs = load_sequences(directory / "sequences.ups")
    if len(seqs) != manifest["count"]:
        raise ValueError("manifest count disagrees with sequence file")
    out = []
    for seq, attrs, token in zip(seqs, manifest["attributes"], manifest["tokens"]):
        parts = seq.split()
        out.append(
            CompositionSample(
                tuple(unpack(p) for p in parts[1:]),
                unpack(parts[0]),
                tuple((int(r), int(c)) for r, c in attrs),
                int(token),
            )
        )
    return out
