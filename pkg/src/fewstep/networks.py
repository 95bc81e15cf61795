"""Time- and condition-aware velocity networks.

``PointNet`` is a residual SiLU MLP for low-dimensional toys. ``SeqNet`` reads a
unified target+reference token sequence and predicts velocity for the target
rows only. Tokens mix through a per-token MLP plus two fixed pooling maps
built from the shape descriptors. One map averages the spatially aligned
tokens of the other segments. The other takes the mean over all reference
rows. Each segment slot has its own learned embedding, so reference order is
visible to the net.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor
from .packing import MAX_REFERENCES, ShapeDescriptor, UnifiedSequence
from .schedule import check_time

NULL_TOKEN = 0


@dataclass(frozen=True)
class NetSpec:
    kind: str = "point"  # "point" | "seq"
    dim: int = 2  # point: data dim; seq: token dim D
    hidden: int = 128
    depth: int = 3
    time_dim: int = 16
    vocab: int = 2  # condition ids incl. the null token 0
    pos_dim: int = 8  # seq only
    zero_out: bool = False

    def __post_init__(self):
        if self.kind not in ("point", "seq"):
            raise ValueError(f"unknown net kind {self.kind!r}")
        if self.dim < 1 or self.hidden < 1 or self.depth < 1 or self.vocab < 2:
            raise ValueError(f"invalid net spec {self}")
        if self.time_dim % 2 or self.pos_dim % 4:
            raise ValueError("time_dim must be even and pos_dim a multiple of 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


def time_frequencies(time_dim: int) -> np.ndarray:
    # Lowest angular frequency is pi: cos(pi t) is monotone on [0, 1], so the
    # embedding is injective there.
    return np.pi * 2.0 ** np.arange(time_dim // 2)


def time_embedding(t, time_dim: int) -> np.ndarray:
    t = np.atleast_1d(check_time(t))
    ang = t[:, None] * time_frequencies(time_dim)[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _condition_ids(c, batch: int) -> np.ndarray:
    ids = np.asarray(c, dtype=np.int64)
    if ids.ndim == 0:
        ids = np.full(batch, int(ids))
    if ids.shape != (batch,) and ids.shape != (1,):
        raise ShapeError(f"condition ids {ids.shape} do not match batch {batch}")
    return ids


@dataclass(frozen=True)
class SeqCondition:
    """Reference tokens and layout for a batch sharing one sequence layout."""

    refs: np.ndarray  # (B, N_ref_total, D)
    descriptors: tuple[ShapeDescriptor, ...]  # target first
    token: object = 1

    def __post_init__(self):
        refs = np.asarray(self.refs, dtype=np.float64)
        if refs.ndim == 2:
            refs = refs[None]
        object.__setattr__(self, "refs", refs)
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        n_ref = sum(d.num_tokens for d in self.descriptors[1:])
        if refs.shape[1] != n_ref:
            raise ShapeError(f"reference rows {refs.shape[1]} != descriptor total {n_ref}")

    def with_token(self, token) -> "SeqCondition":
        return replace(self, token=token)

    @classmethod
    def from_sequence(cls, seq: UnifiedSequence, token=1) -> "SeqCondition":
        rows = seq.tokens[seq.target_rows.stop :]
        return cls(rows[None], seq.descriptors, token)


def null_condition(c):
    if isinstance(c, SeqCondition):
        return c.with_token(NULL_TOKEN)
    return np.zeros_like(np.asarray(c, dtype=np.int64))


def condition_tokens(c) -> np.ndarray:
    return np.asarray(c.token if isinstance(c, SeqCondition) else c, dtype=np.int64)


def _init_params(spec: NetSpec, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))

    h = spec.hidden
    p: dict[str, np.ndarray] = {
        "in.x": dense(spec.dim, h),
        "in.t": dense(spec.time_dim, h),
        "in.b": np.zeros(h),
        "cond": rng.normal(0.0, 0.5, size=(spec.vocab, h)),
    }
    if spec.kind == "seq":
        p["in.pos"] = dense(spec.pos_dim, h)
        p["segment"] = rng.normal(0.0, 0.5, size=(MAX_REFERENCES + 1, h))
        p["count"] = rng.normal(0.0, 0.5, size=(MAX_REFERENCES + 1, h))
    for i in range(spec.depth):
        p[f"block{i}.w"] = dense(h, h)
        p[f"block{i}.b"] = np.zeros(h)
        if spec.kind == "seq":
            p[f"block{i}.aligned"] = dense(h, h, 0.5)
            p[f"block{i}.pooled"] = dense(h, h, 0.5)
    p["out.w"] = np.zeros((h, spec.dim)) if spec.zero_out else dense(h, spec.dim)
    p["out.b"] = np.zeros(spec.dim)
    return ParamSet(p)


class VelocityNet:
    """Predicts velocity F(x_t, t, c); shares ``spec`` with any param copy."""

    def __init__(self, spec: NetSpec, params: ParamSet | None = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else _init_params(spec, seed)
        self.calls = 0  # forward evaluations, used for NFE cross-checks

    def with_params(self, params: ParamSet) -> "VelocityNet":
        return type(self)(self.spec, params)

    def frozen(self) -> "VelocityNet":
        return self.with_params(self.params.copy(frozen=True))

    def copy(self) -> "VelocityNet":
        return self.with_params(self.params.copy(frozen=False))

    def __call__(self, x_t, t, c) -> Tensor:
        return self.forward(x_t, t, c)

    def forward(self, x_t, t, c) -> Tensor:
        self.calls += 1
        if self.spec.kind == "point":
            return self._forward_point(ad.tensor(x_t), t, c)
        if not isinstance(c, SeqCondition):
            raise TypeError("sequence nets take a SeqCondition")
        return self._forward_seq(ad.tensor(x_t), t, c)

    def _embed(self, t, c, batch: int) -> Tensor:
        p = self.params
        temb = time_embedding(t, self.spec.time_dim)
        ids = _condition_ids(condition_tokens(c), batch)
        if np.any(ids < 0) or np.any(ids >= self.spec.vocab):
            raise ShapeError(f"condition id outside [0, {self.spec.vocab})")
        return ad.matmul(temb, p["in.t"]) + ad.take_rows(p["cond"], ids) + p["in.b"]

    def _forward_point(self, x: Tensor, t, c) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.dim:
            raise ShapeError(f"expected (batch, {self.spec.dim}) input, got {x.shape}")
        p = self.params
        h = ad.silu(ad.matmul(x, p["in.x"]) + self._embed(t, c, x.shape[0]))
        for i in range(self.spec.depth):
            h = h + ad.silu(ad.matmul(h, p[f"block{i}.w"]) + p[f"block{i}.b"])
        return ad.matmul(h, p["out.w"]) + p["out.b"]

    def _forward_seq(self, x: Tensor, t, c: SeqCondition) -> Tensor:
        descs = c.descriptors
        n_target = descs[0].num_tokens
        if x.ndim != 3 or x.shape[1:] != (n_target, self.spec.dim):
            raise ShapeError(f"expected (batch, {n_target}, {self.spec.dim}) target, got {x.shape}")
        batch = x.shape[0]
        refs = c.refs
        if refs.shape[0] == 1 and batch > 1:
            refs = np.broadcast_to(refs, (batch,) + refs.shape[1:])
        if refs.shape[0] != batch or refs.shape[2] != self.spec.dim:
            raise ShapeError(f"reference batch {refs.shape} does not match target {x.shape}")
        lay = _layout(descs, self.spec.pos_dim)
        p = self.params
        tokens = ad.concat([x, Tensor(refs)], axis=1)
        static = (
            ad.take_rows(p["segment"], lay.slots)
            + ad.matmul(lay.pos, p["in.pos"])
            + ad.take_rows(p["count"], np.array([len(descs) - 1]))
        )
        emb = self._embed(t, c, batch)
        h = ad.matmul(tokens, p["in.x"]) + static + ad.reshape(emb, (emb.shape[0], 1, -1))
        h = ad.silu(h)
        for i in range(self.spec.depth):
            aligned = ad.lmatmul(lay.aligned, h)
            pooled = ad.lmatmul(lay.pooled, h)
            pre = (
                ad.matmul(h, p[f"block{i}.w"])
                + ad.matmul(aligned, p[f"block{i}.aligned"])
                + ad.matmul(pooled, p[f"block{i}.pooled"])
                + p[f"block{i}.b"]
            )
            h = h + ad.silu(pre)
        out = ad.matmul(h[:, :n_target, :], p["out.w"]) + p["out.b"]
        return out


@dataclass(frozen=True)
class _Layout:
    slots: np.ndarray
    pos: np.ndarray
    aligned: np.ndarray
    pooled: np.ndarray


def _token_coords(d: ShapeDescriptor) -> np.ndarray:
    rows, cols = d.height // 2, d.width // 2
    i, j = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([(i.ravel() + 0.5) / rows, (j.ravel() + 0.5) / cols], axis=1)


@functools.lru_cache(maxsize=256)
def _layout(descs: tuple[ShapeDescriptor, ...], pos_dim: int) -> _Layout:
    coords = [_token_coords(d) for d in descs]
    sizes = [len(cc) for cc in coords]
    total = sum(sizes)
    starts = np.cumsum([0] + sizes[:-1])
    slots = np.concatenate([np.full(n, k) for k, n in enumerate(sizes)])
    allc = np.concatenate(coords, axis=0)
    freqs = np.pi * 2.0 ** np.arange(pos_dim // 4)
    ang = allc[:, :, None] * freqs[None, None, :]
    pos = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(total, pos_dim)

    # aligned[i, j]: token j sits at the grid cell of another segment that
    # contains token i's normalized centre.
    aligned = np.zeros((total, total))
    n_seg = len(descs)
    for a in range(n_seg):
        for b in range(n_seg):
            if a == b:
                continue
            rows_b, cols_b = descs[b].height // 2, descs[b].width // 2
            ci = np.minimum((coords[a][:, 0] * rows_b).astype(int), rows_b - 1)
            cj = np.minimum((coords[a][:, 1] * cols_b).astype(int), cols_b - 1)
            aligned[starts[a] + np.arange(sizes[a]), starts[b] + ci * cols_b + cj] = 1.0 / (n_seg - 1)
    pooled = np.zeros((total, total))
    n_ref = total - sizes[0]
    pooled[:, sizes[0] :] = 1.0 / n_ref
    for arr in (slots, pos, aligned, pooled):
        arr.flags.writeable = False
    return _Layout(slots, pos, aligned, pooled)


def cfg_forward(net: VelocityNet, x_t, t, c, w: float) -> Tensor:
    """Classifier-free guidance: F_u + w (F_c - F_u); w = 1 is the plain forward."""
    if w == 1.0:
        return net(x_t, t, c)
    if np.any(condition_tokens(c) == NULL_TOKEN):
        raise ValueError("guidance needs a non-null condition")
    f_c = net(x_t, t, c)
    f_u = net(x_t, t, null_condition(c))
    return f_u + (f_c - f_u) * w


def seq_forward(net: VelocityNet, seq: UnifiedSequence, t, c=1) -> Tensor:
    """Velocity for the target rows of one unified sequence, shape (N_O, D)."""
    cond = SeqCondition.from_sequence(seq, token=c)
    x = seq.tokens[seq.target_rows][None]
    return net(x, t, cond)[0]


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
