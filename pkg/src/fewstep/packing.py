"""Latent grids, 2x2 patch packing and unified target+reference sequences.

Token ``i * (W/2) + j`` of a packed grid holds the 2x2 block at rows
``2i..2i+1`` and columns ``2j..2j+1``, channel-major: all four values of
channel 0 (row-major within the block), then channel 1, and so on.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

TARGET = "target"
REFERENCE = "reference"
MAX_REFERENCES = 6
PIXEL_BUDGET = 1024 * 1024
DOWNSAMPLE = 2  # toy encoder factor, pixel side / latent side

MAGIC = b"UPS1"
_ROLE_CODES = {TARGET: 0, REFERENCE: 1}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeDescriptor:
    height: int
    width: int
    role: str = TARGET
    index: int = 0

    def __post_init__(self):
        if self.role not in _ROLE_CODES:
            raise PackingError(f"unknown role {self.role!r}")
        if self.height <= 0 or self.width <= 0 or self.height % 2 or self.width % 2:
            raise PackingError(f"latent dims must be positive and even, got {self.height}x{self.width}")

    @property
    def num_tokens(self) -> int:
        return (self.height // 2) * (self.width // 2)

    def with_role(self, role: str, index: int) -> "ShapeDescriptor":
        return ShapeDescriptor(self.height, self.width, role, index)


@dataclass(frozen=True)
class LatentGrid:
    values: np.ndarray  # (C, H, W)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise PackingError(f"latent grid must be C x H x W, got shape {v.shape}")
        c, h, w = v.shape
        if min(c, h, w) <= 0 or h % 2 or w % 2:
            raise PackingError(f"latent grid needs even spatial dims, got {h}x{w}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PackedSeq:
    tokens: np.ndarray  # (N, D)
    descriptor: ShapeDescriptor

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.float64)
        object.__setattr__(self, "tokens", tok)
        if tok.ndim != 2 or tok.shape[0] != self.descriptor.num_tokens or tok.shape[1] % 4:
            raise PackingError(
                f"tokens {tok.shape} inconsistent with descriptor "
                f"{self.descriptor.height}x{self.descriptor.width}"
            )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def pack_array(values: np.ndarray) -> np.ndarray:
    """Pack ``(..., C, H, W)`` into ``(..., N, 4C)``."""
    v = np.asarray(values)
    *lead, c, h, w = v.shape
    if h % 2 or w % 2:
        raise PackingError(f"odd latent dims {h}x{w} cannot tile 2x2")
    v = v.reshape(*lead, c, h // 2, 2, w // 2, 2)
    n = len(lead)
    perm = tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4)
    return v.transpose(perm).reshape(*lead, (h // 2) * (w // 2), 4 * c)


def unpack_array(tokens: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of ``pack_array``: ``(..., N, 4C)`` back to ``(..., C, H, W)``."""
    t = np.asarray(tokens)
    *lead, n, d = t.shape
    if height % 2 or width % 2 or n != (height // 2) * (width // 2) or d % 4:
        raise PackingError(f"{n} tokens of dim {d} cannot unpack to {height}x{width}")
    c = d // 4
    t = t.reshape(*lead, height // 2, width // 2, c, 2, 2)
    k = len(lead)
    perm = tuple(range(k)) + (k + 2, k, k + 3, k + 1, k + 4)
    return t.transpose(perm).reshape(*lead, c, height, width)


def pack(grid: LatentGrid, role: str = TARGET, index: int = 0) -> PackedSeq:
    desc = ShapeDescriptor(grid.height, grid.width, role, index)
    return PackedSeq(pack_array(grid.values), desc)


def unpack(seq: PackedSeq) -> LatentGrid:
    d = seq.descriptor
    return LatentGrid(unpack_array(seq.tokens, d.height, d.width))


@dataclass(frozen=True)
class UnifiedSequence:
    """Target tokens followed by 1-6 reference segments, with shape descriptors."""

    tokens: np.ndarray  # (N_tot, D)
    descriptors: tuple[ShapeDescriptor, ...]
    offsets: tuple[int, ...] = field(default=())

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.float64)
        object.__setattr__(self, "tokens", tok)
        descs = tuple(self.descriptors)
        object.__setattr__(self, "descriptors", descs)
        if not descs or descs[0].role != TARGET:
            raise PackingError("first segment must be the target")
        if any(d.role != REFERENCE for d in descs[1:]):
            raise PackingError("exactly one target segment is allowed")
        k = len(descs) - 1
        if not 1 <= k <= MAX_REFERENCES:
            raise PackingError(f"need 1..{MAX_REFERENCES} references, got {k}")
        offsets = tuple(int(o) for o in np.cumsum([0] + [d.num_tokens for d in descs[:-1]]))
        if self.offsets and tuple(self.offsets) != offsets:
            raise PackingError(f"offsets {self.offsets} disagree with descriptors {offsets}")
        object.__setattr__(self, "offsets", offsets)
        total = offsets[-1] + descs[-1].num_tokens
        if tok.ndim != 2 or tok.shape[0] != total:
            raise PackingError(f"token table {tok.shape} does not cover {total} rows")

    @property
    def num_references(self) -> int:
        return len(self.descriptors) - 1

    @property
    def target_rows(self) -> slice:
        return self.segment(0)

    def segment(self, k: int) -> slice:
        start = self.offsets[k]
        return slice(start, start + self.descriptors[k].num_tokens)

    def segment_ids(self) -> np.ndarray:
        """Per-row segment slot (0 = target, k = reference k)."""
        ids = np.empty(self.tokens.shape[0], dtype=np.int64)
        for k in range(len(self.descriptors)):
            ids[self.segment(k)] = k
        return ids

    def split(self) -> list[PackedSeq]:
        return [PackedSeq(self.tokens[self.segment(k)], d) for k, d in enumerate(self.descriptors)]


def pixel_count(descs: Sequence[ShapeDescriptor], downsample: int = DOWNSAMPLE) -> int:
    return sum(d.height * d.width for d in descs) * downsample * downsample


def build_unified(
    target: PackedSeq,
    refs: Sequence[PackedSeq],
    pixel_budget: int = PIXEL_BUDGET,
    downsample: int = DOWNSAMPLE,
) -> UnifiedSequence:
    refs = list(refs)
    if not 1 <= len(refs) <= MAX_REFERENCES:
        raise PackingError(f"need 1..{MAX_REFERENCES} references, got {len(refs)}")
    dims = {target.dim} | {r.dim for r in refs}
    if len(dims) != 1:
        raise PackingError(f"token dims differ across segments: {sorted(dims)}")
    descs = [target.descriptor.with_role(TARGET, 0)]
    descs += [r.descriptor.with_role(REFERENCE, k + 1) for k, r in enumerate(refs)]
    used = pixel_count(descs, downsample)
    if used > pixel_budget:
        raise PackingError(f"{used} pixels exceed the budget of {pixel_budget}")
    tokens = np.concatenate([target.tokens] + [r.tokens for r in refs], axis=0)
    return UnifiedSequence(tokens, tuple(descs))


def replace_target_with_noise(seq: UnifiedSequence, seed) -> UnifiedSequence:
    """Swap the target rows for N(0, I) draws; reference rows are copied untouched."""
    rng = np.random.default_rng(seed)
    tokens = seq.tokens.copy()
    rows = seq.target_rows
    tokens[rows] = rng.standard_normal(tokens[rows].shape)
    return UnifiedSequence(tokens, seq.descriptors, seq.offsets)


# binary record format ------------------------------------------------------
#
#   b"UPS1" | u32 n_segments | u32 dim | n_segments x (u32 height, u32 width,
#   u32 role, u32 index, u32 offset) | f64 tokens (N_tot x dim), little-endian


def write_record(fh: BinaryIO, seq: UnifiedSequence | PackedSeq) -> None:
    if isinstance(seq, PackedSeq):
        descs, offsets, tokens = (seq.descriptor,), (0,), seq.tokens
    else:
        descs, offsets, tokens = seq.descriptors, seq.offsets, seq.tokens
    fh.write(MAGIC)
    fh.write(struct.pack("<II", len(descs), tokens.shape[1]))
    for d, off in zip(descs, offsets):
        fh.write(struct.pack("<5I", d.height, d.width, _ROLE_CODES[d.role], d.index, off))
    fh.write(np.ascontiguousarray(tokens, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise PackingError("truncated sequence record")
    return buf


def read_record(fh: BinaryIO) -> UnifiedSequence | PackedSeq | None:
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise PackingError(f"bad magic {magic!r}")
    n_seg, dim = struct.unpack("<II", _read_exact(fh, 8))
    descs, offsets = [], []
    for _ in range(n_seg):
        h, w, role, index, off = struct.unpack("<5I", _read_exact(fh, 20))
        if role not in _ROLE_NAMES:
            raise PackingError(f"bad role code {role}")
        descs.append(ShapeDescriptor(h, w, _ROLE_NAMES[role], index))
        offsets.append(off)
    total = sum(d.num_tokens for d in descs)
    raw = _read_exact(fh, 8 * total * dim)
    tokens = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(total, dim)
    if n_seg == 1:
        return PackedSeq(tokens, descs[0])
    return UnifiedSequence(tokens, tuple(descs), tuple(offsets))


def dump_sequences(path: str | Path, seqs: Sequence[UnifiedSequence | PackedSeq]) -> None:
    buf = io.BytesIO()
    for s in seqs:
        write_record(buf, s)
    Path(path).write_bytes(buf.getvalue())


def load_sequences(path: str | Path) -> list[UnifiedSequence | PackedSeq]:
    out = []
    with open(path, "rb") as fh:
        while (rec := read_record(fh)) is not None:
            out.append(rec)
    return out
