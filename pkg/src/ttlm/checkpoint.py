"""Binary checkpoint format.

Little-endian layout::

    b"TTLM"  magic
    u32      format version (1)
    u32 x3   V, E, H
    u32      flags (bit 0: output projection tied to the embedding)
    u64      vocabulary hash
    u32      thinking tokens per word the model was trained with
    f64[]    embedding, w_input, w_hidden, bias_gates, w_out, bias_out (row-major)

The tied projection is still written (as a copy of the embedding) so every
file carries all six tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MagicMismatch, TruncatedCheckpoint, VersionMismatch
from .model import TENSOR_NAMES, ModelParams

MAGIC = b"TTLM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQI")
FLAG_TIED = 1


@dataclass(frozen=True)
class CheckpointInfo:
    vocab_hash: int = 0
    thinking_n: int = 0


def _shapes(V: int, E: int, H: int) -> list[tuple[int, ...]]:
    return [(V, E), (4 * H, E), (4 * H, H), (4 * H,), (V, H), (V,)]


def save_checkpoint(params: ModelParams, path, vocab_hash: int = 0, thinking_n: int = 0) -> None:
    V, E, H = params.dims
    flags = FLAG_TIED if params.tied else 0
    parts = [_HEADER.pack(MAGIC, VERSION, V, E, H, flags, vocab_hash, thinking_n)]
    for name in TENSOR_NAMES:
        arr = params.output_weight if name == "w_out" else getattr(params, name)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelParams, CheckpointInfo]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatch(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpoint(f"{path}: header truncated")
    _, version, V, E, H, flags, vhash, n = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    shapes = _shapes(V, E, H)
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) < expected:
        raise TruncatedCheckpoint(f"{path}: {len(data)} bytes, expected {expected}")
    tensors = {}
    offset = _HEADER.size
    for name, shape in zip(TENSOR_NAMES, shapes):
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if flags & FLAG_TIED:
        tensors["w_out"] = None
    return ModelParams(**tensors), CheckpointInfo(vhash, n)


def load_checkpoint(path) -> ModelParams:
    return read_checkpoint(path)[0]
