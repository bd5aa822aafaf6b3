"""Binary checkpoint format and key=value config sidecars.

Layout (all integers little-endian)::

    magic b"CCDN" | u32 version | u32 count
    count x ( u32 path_len | path utf-8 | u32 ndim | ndim x u64 dim | float64 LE data )
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .tensor import ParameterSet, Tensor

MAGIC = b"CCDN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(params: ParameterSet) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for path in params:
        arr = np.asarray(params[path].data, dtype="<f8", order="C")
        name = path.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode(payload: bytes) -> ParameterSet:
    if payload[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    params = ParameterSet()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", payload, off)
        off += 4
        path = payload[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", payload, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", payload, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        params[path] = Tensor(arr.astype(np.float64), requires_grad=True)
    if off != len(payload):
        raise CheckpointError("trailing bytes after last tensor")
    return params


def save(params: ParameterSet, path: str | os.PathLike) -> None:
    atomic_write(path, encode(params))


def load(path: str | os.PathLike) -> ParameterSet:
    return decode(Path(path).read_bytes())


def checksum(params: ParameterSet) -> str:
    return hashlib.sha256(encode(params)).hexdigest()


def dump_config(values: dict) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
