"""Binary checkpoints: named tensors + optimizer state + run metadata.

Layout (all little-endian): magic "MODA", u32 version, u32 tensor count;
per tensor: u16 name length, UTF-8 name, u8 dtype code (0 = f64,
1 = u64), u8 rank, rank x u64 dims, raw payload; trailing CRC32 over
everything before it. Saving the result of a load reproduces the file
byte for byte.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

_MAGIC = b"MODA"
_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u8")}
_CODES = {np.dtype("float64"): 0, np.dtype("uint64"): 1}


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<II", _VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode()
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<BB", code, arr.ndim)
        if arr.ndim:
            buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype(_DTYPES[code], copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode()
        off += name_len
        code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", raw, off) if rank else ()
        off += 8 * rank
        n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
        arr = np.frombuffer(raw, dtype=_DTYPES[code], count=n_bytes // 8, offset=off)
        out[name] = arr.reshape(dims).copy()
        off += n_bytes
    if off != len(raw) - 4:
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return out


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    stage: int = 0
    config_hash: int = 0

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "meta.step": np.uint64(self.step),
            "meta.seed": np.uint64(self.seed),
            "meta.stage": np.uint64(self.stage),
            "meta.config_hash": np.uint64(self.config_hash),
        }
        for name, arr in self.params.items():
            out[f"param.{name}"] = arr
        for name, arr in self.opt_m.items():
            out[f"optim.m.{name}"] = arr
        for name, arr in self.opt_v.items():
            out[f"optim.v.{name}"] = arr
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "Checkpoint":
        ckpt = cls(params={})
        for name, arr in tensors.items():
            if name.startswith("param."):
                ckpt.params[name[6:]] = arr
            elif name.startswith("optim.m."):
                ckpt.opt_m[name[8:]] = arr
            elif name.startswith("optim.v."):
                ckpt.opt_v[name[8:]] = arr
            elif name == "meta.step":
                ckpt.step = int(arr)
            elif name == "meta.seed":
                ckpt.seed = int(arr)
            elif name == "meta.stage":
                ckpt.stage = int(arr)
            elif name == "meta.config_hash":
                ckpt.config_hash = int(arr)
            else:
                raise CheckpointError(f"unrecognized checkpoint tensor {name!r}")
        return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    save_tensors(path, ckpt.to_tensors())


def load_checkpoint(path, expected_config_hash: int | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_tensors(load_tensors(path))
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {ckpt.config_hash:#010x} does not match the "
            f"active config {expected_config_hash:#010x}"
        )
    return ckpt
