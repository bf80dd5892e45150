"""``.rten`` tensor files: one JSON header line, then raw little-endian float32."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .tensor import DTensor


class RtenFormatError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_rten(t: DTensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, DTensor) else np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = {"dtype": "f32", "shape": list(arr.shape), "order": "row-major", "endian": "little"}
    return json.dumps(header).encode("utf-8") + b"\n" + arr.tobytes()


def decode_rten(buf: bytes) -> DTensor:
    nl = buf.find(b"\n")
    if nl < 0:
        raise RtenFormatError("missing header line")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RtenFormatError(f"bad header: {exc}") from None
    if header.get("dtype") != "f32" or header.get("order", "row-major") != "row-major":
        raise RtenFormatError(f"unsupported header {header}")
    if header.get("endian", "little") != "little":
        raise RtenFormatError("only little-endian payloads are supported")
    shape = tuple(int(s) for s in header["shape"])
    payload = buf[nl + 1 :]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise RtenFormatError(f"payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return DTensor(arr)


def save_rten(path: str | os.PathLike, t: DTensor | np.ndarray) -> None:
    atomic_write_bytes(path, encode_rten(t))


def load_rten(path: str | os.PathLike) -> DTensor:
    return decode_rten(Path(path).read_bytes())
