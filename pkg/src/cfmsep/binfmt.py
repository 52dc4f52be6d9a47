"""Self-describing tensor container shared by eval sets, checkpoints and outputs.

Layout: 8-byte magic, u16 version, u32 header length, UTF-8 JSON header,
then a little-endian float32 payload. The header's ``tensors`` list gives
each tensor's name, shape and byte offset into the payload.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

VERSION = 1
DATASET_MAGIC = b"CFMSEPDS"
CHECKPOINT_MAGIC = b"CFMSEPCK"
_PRELUDE = struct.Struct("<8sHI")


class FormatError(ValueError):
    pass


def encode(magic: bytes, tensors: "OrderedDict[str, torch.Tensor | np.ndarray]", meta: dict) -> bytes:
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({**meta, "tensors": index}, sort_keys=True).encode()
    return _PRELUDE.pack(magic, VERSION, len(header)) + header + b"".join(chunks)


def decode(magic: bytes, blob: bytes) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    if len(blob) < _PRELUDE.size:
        raise FormatError("truncated file: missing prelude")
    got_magic, version, hlen = _PRELUDE.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    start = _PRELUDE.size + hlen
    if len(blob) < start:
        raise FormatError("truncated file: incomplete header")
    header = json.loads(blob[_PRELUDE.size:start].decode())
    payload = memoryview(blob)[start:]
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    end = 0
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo, hi = entry["offset"], entry["offset"] + 4 * count
        if hi > len(payload):
            raise FormatError(f"truncated payload in tensor {entry['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
        end = max(end, hi)
    if end != len(payload):
        raise FormatError(f"payload size {len(payload)} does not match index ({end})")
    return tensors, header


def write(path: str | Path, magic: bytes, tensors, meta: dict) -> None:
    Path(path).write_bytes(encode(magic, tensors, meta))


def read(path: str | Path, magic: bytes):
    return decode(magic, Path(path).read_bytes())


def header_size(blob: bytes) -> int:
    _, _, hlen = _PRELUDE.unpack_from(blob)
    return _PRELUDE.size + hlen
