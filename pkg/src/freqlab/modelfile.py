"""Versioned binary container for trained models.

Layout (little-endian): magic ``FQLM``, u8 model kind, u32 array count, then
per array u32 ndim, ndim x u32 shape and float64 data; finally u32 length and
a UTF-8 JSON metadata trailer with sorted keys.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoError

MAGIC = b"FQLM"
KINDS = {"logistic": 0, "svm": 1, "eigenfaces": 2, "cnn": 3, "knn": 4, "stats": 5}


def encode(kind: str, arrays, metadata: dict) -> bytes:
    parts = [struct.pack("<4sBI", MAGIC, KINDS[kind], len(arrays))]
    for a in arrays:
        a = np.array(a, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    meta = json.dumps(metadata, sort_keys=True, default=_jsonable).encode()
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def decode(data: bytes):
    try:
        magic, tag, count = struct.unpack_from("<4sBI", data)
        if magic != MAGIC:
            raise IoError(f"bad model magic {magic!r}")
        off = struct.calcsize("<4sBI")
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
            off += 8 * n
        (mlen,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off : off + mlen].decode())
    except (struct.error, ValueError) as exc:
        raise IoError(f"corrupt model file: {exc}") from exc
    kind = {v: k for k, v in KINDS.items()}.get(tag)
    if kind is None:
        raise IoError(f"unknown model kind tag {tag}")
    return kind, arrays, meta


def save(path, kind: str, arrays, metadata: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(kind, arrays, metadata))
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write model {path}: {exc}") from exc


def load(path):
    try:
        return decode(Path(path).read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
