"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MTRA" | version | meta_len | meta (UTF-8 JSON) | n_params |
    repeated: name_len | name | rank | dims[rank] | float32 LE values

Metadata holds the model config, layout string, tokenizer and seed. Writes
go to a temporary file in the target directory and are renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layout import LayerLayout
from .model import HybridModel, ModelConfig
from .tasks import Tokenizer

MAGIC = b"MTRA"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: HybridModel
    tokenizer: Tokenizer
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "config": self.model.config.to_dict(),
            "layout": str(self.model.layout),
            "tokenizer": {"mode": self.tokenizer.mode, "n_symbols": self.tokenizer.n_symbols},
            "seed": self.seed,
            "extra": self.extra,
        }


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = ckpt.model.named_params()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4:
        raise TruncatedError("checkpoint truncated while reading magic")
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    config = ModelConfig(**meta["config"])
    layout = LayerLayout.parse(meta["layout"])
    if len(layout) != config.depth:
        raise CheckpointError("layout length does not match depth")
    model = HybridModel.init(config, layout, seed=0)
    params = model.named_params()
    n = r.u32("parameter count")
    seen = set()
    for _ in range(n):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if params[name].shape != tuple(dims):
            raise CheckpointError(f"parameter {name!r} has shape {dims}, expected {params[name].shape}")
        params[name].data = values.astype(np.float32)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)[:3]}")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after parameter table")
    tok = Tokenizer(**meta["tokenizer"])
    return Checkpoint(model, tok, int(meta.get("seed", 0)), meta.get("extra", {}))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
