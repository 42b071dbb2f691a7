"""
Model checkpoint files.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"TAMCLCKP"
    8       4     format version (uint32, currently 1)
    12      8     header length in bytes (uint64)
    20      n     UTF-8 JSON header
    20+n    ...   parameter payload: float64 little-endian arrays, concatenated

The JSON header holds ``metadata`` (model config, frozen mask, task list) and
``params``: a list of ``{"name", "shape", "offset"}`` entries with offsets
counted in bytes from the start of the payload. Keys are sorted so equal
models always serialise to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from tamcl.errors import ValidationError

MAGIC = b"TAMCLCKP"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray], metadata: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"metadata": metadata, "params": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ValidationError("not a tamcl checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode())
    payload = memoryview(blob)[20 + hlen:]
    arrays = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header["metadata"]


def save_model(model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model.state_arrays(), model.metadata()))
    return path


def load_model(path: Union[str, Path]):
    from tamcl.model import TAMCLModel

    arrays, metadata = loads(Path(path).read_bytes())
    return TAMCLModel.from_state(metadata, arrays)


def params_hash(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in insertion order."""
    h = hashlib.sha256()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
