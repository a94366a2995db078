"""Binary ``.winckpt`` checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"WINCKPT\\0"
    1 byte    format version (currently 1)
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       float32 LE arrays, concatenated in the order listed by
              header["arrays"], then header["optimizer"]["arrays"] if present

Model arrays are stored layer by layer: conv weight, conv bias, then BN
gamma, beta, running_mean, running_var when the layer has BN. Optimizer
moments follow as ``m/<name>`` then ``v/<name>`` for every learnable array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .models import ConfigError, Model, ModelConfig, build_model
from .optim import OptState

MAGIC = b"WINCKPT\0"
VERSION = 1
EXTENSION = ".winckpt"
_LE_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic)."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload."""


class CheckpointCorruptError(CheckpointError):
    """Header or payload is internally inconsistent."""


@dataclass
class Checkpoint:
    model: Model
    optimizer: OptState | None = None
    metadata: dict[str, Any] = field(default_factory=dict)


def _array_entries(arrays: dict[str, np.ndarray]) -> list[list[Any]]:
    return [[name, list(a.shape)] for name, a in arrays.items()]


def encode(ckpt: Checkpoint) -> bytes:
    model_arrays = ckpt.model.named_arrays()
    header: dict[str, Any] = {
        "config": ckpt.model.config.to_dict(),
        "metadata": ckpt.metadata,
        "arrays": _array_entries(model_arrays),
        "optimizer": None,
    }
    opt_arrays: dict[str, np.ndarray] = {}
    if ckpt.optimizer is not None:
        for name in ckpt.model.named_parameters():
            if ckpt.optimizer.m:
                opt_arrays[f"m/{name}"] = ckpt.optimizer.m[name]
                opt_arrays[f"v/{name}"] = ckpt.optimizer.v[name]
        header["optimizer"] = {"step": int(ckpt.optimizer.step), "arrays": _array_entries(opt_arrays)}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(text)), text]
    for a in list(model_arrays.values()) + list(opt_arrays.values()):
        parts.append(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    return b"".join(parts)


def _read_arrays(buf: memoryview, offset: int, entries: list[Any]) -> tuple[dict[str, np.ndarray], int]:
    out = {}
    for entry in entries:
        try:
            name, shape = entry
            shape = tuple(int(s) for s in shape)
        except (TypeError, ValueError):
            raise CheckpointCorruptError(f"bad array entry in header: {entry!r}") from None
        if any(s < 0 for s in shape):
            raise CheckpointCorruptError(f"negative dimension for {name}: {shape}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(buf):
            raise CheckpointTruncatedError(f"payload ends inside array {name!r}")
        out[name] = np.frombuffer(buf[offset : offset + nbytes], dtype=_LE_F32).astype(np.float32).reshape(shape)
        offset += nbytes
    return out, offset


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data) and data:
            raise CheckpointTruncatedError("file ends inside the magic string")
        raise CheckpointFormatError("not a .winckpt file (bad magic)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a .winckpt file (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 5:
        raise CheckpointTruncatedError("file ends inside the fixed header")
    version, hlen = struct.unpack_from("<BI", data, pos)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    pos += 5
    if len(data) < pos + hlen:
        raise CheckpointTruncatedError("file ends inside the JSON header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        metadata = header["metadata"]
        entries = header["arrays"]
        opt_header = header["optimizer"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from None
    pos += hlen

    buf = memoryview(data)
    arrays, pos = _read_arrays(buf, pos, entries)
    model = build_model(cfg, seed=0)
    try:
        model.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointCorruptError(str(exc)) from None

    optimizer = None
    if opt_header is not None:
        try:
            opt_arrays, pos = _read_arrays(buf, pos, opt_header["arrays"])
            step = int(opt_header["step"])
        except (KeyError, TypeError) as exc:
            raise CheckpointCorruptError(f"bad optimizer header: {exc}") from None
        optimizer = OptState(
            m={k[2:]: v for k, v in opt_arrays.items() if k.startswith("m/")},
            v={k[2:]: v for k, v in opt_arrays.items() if k.startswith("v/")},
            step=step,
        )
        if optimizer.m and set(optimizer.m) != set(model.named_parameters()):
            raise CheckpointCorruptError("optimizer moments do not match model parameters")
    if pos != len(data):
        raise CheckpointCorruptError(f"{len(data) - pos} trailing bytes after payload")
    return Checkpoint(model, optimizer, metadata)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def read_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_checkpoint(
    m: Model,
    path: str | Path,
    optimizer: OptState | None = None,
    metadata: dict[str, Any] | None = None,
) -> None:
    write_checkpoint(Checkpoint(m, optimizer, dict(metadata or {})), path)


def load_checkpoint(path: str | Path) -> Model:
    return read_checkpoint(path).model
