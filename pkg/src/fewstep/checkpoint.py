"""Binary checkpoints.

Layout (little-endian)::

    b"UPCK" | u32 version | u32 header_len | header JSON | u32 crc32(header)
    then, for each blob listed in the header: f64 data | u32 crc32(data)

The header carries the architecture, training step, config hash, blob names
and shapes, and the optimizer step when moments are stored.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamW, ParamSet
from .networks import NetSpec, VelocityNet

MAGIC = b"UPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    """Corrupt or truncated checkpoint."""


@dataclass
class Checkpoint:
    spec: NetSpec
    params: dict[str, np.ndarray]
    step: int = 0
    config_hash: str = ""
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def net(self, frozen: bool = True) -> VelocityNet:
        return VelocityNet(self.spec, ParamSet(self.params, frozen=frozen))

    @classmethod
    def from_net(cls, net: VelocityNet, step: int = 0, config_hash: str = "",
                 opt: AdamW | None = None, meta: dict | None = None) -> "Checkpoint":
        return cls(net.spec, net.params.state(), step, config_hash,
                   opt.state() if opt is not None else None, dict(meta or {}))


def _blobs(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield "param", name, arr
    if ckpt.optimizer is not None:
        for kind in ("m", "v"):
            for name, arr in ckpt.optimizer[kind].items():
                yield f"adam_{kind}", name, arr


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    blobs = list(_blobs(ckpt))
    header = {
        "format_version": ckpt.version,
        "architecture": ckpt.spec.to_dict(),
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "optimizer_step": None if ckpt.optimizer is None else int(ckpt.optimizer["step"]),
        "meta": ckpt.meta,
        "blobs": [{"kind": k, "name": n, "shape": list(np.shape(a))} for k, n, a in blobs],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(hbytes)), hbytes, struct.pack("<I", zlib.crc32(hbytes))]
    for _, _, arr in blobs:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        parts += [data, struct.pack("<I", zlib.crc32(data))]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise ChecksumError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    pos = 12
    hbytes = raw[pos : pos + hlen]
    if len(hbytes) != hlen or len(raw) < pos + hlen + 4:
        raise ChecksumError(f"{path}: truncated header")
    pos += hlen
    (hcrc,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if zlib.crc32(hbytes) != hcrc:
        raise ChecksumError(f"{path}: header checksum mismatch")
    header = json.loads(hbytes)
    params: dict[str, np.ndarray] = {}
    moments: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        data = raw[pos : pos + nbytes]
        if len(data) != nbytes or len(raw) < pos + nbytes + 4:
            raise ChecksumError(f"{path}: truncated blob {blob['name']!r}")
        (crc,) = struct.unpack_from("<I", raw, pos + nbytes)
        if zlib.crc32(data) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in blob {blob['name']!r}")
        pos += nbytes + 4
        arr = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
        if blob["kind"] == "param":
            params[blob["name"]] = arr
        else:
            moments[blob["kind"][-1]][blob["name"]] = arr
    if pos != len(raw):
        raise ChecksumError(f"{path}: {len(raw) - pos} trailing bytes")
    opt = None
    if header["optimizer_step"] is not None:
        opt = {"step": header["optimizer_step"], "m": moments["m"], "v": moments["v"]}
    return Checkpoint(
        NetSpec.from_dict(header["architecture"]),
        params,
        header["step"],
        header["config_hash"],
        opt,
        header["meta"],
        version,
    )
