"""Binary checkpoint codec.

Layout (all integers little-endian)::

    b"VIVATCKPT" | u32 version | u64 meta_len | meta (canonical JSON, UTF-8)
    | u32 tensor_count | tensor entries... | sha256 of everything before (32 bytes)

Each tensor entry is ``u16 name_len | name | u8 dtype | u8 ndim | u64 dim * ndim | raw data``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .errors import CheckpointIntegrityError, CheckpointVersionError

MAGIC = b"VIVATCKPT"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

# code -> (torch dtype, little-endian numpy dtype)
_DTYPES: Dict[int, Tuple[torch.dtype, str]] = {
    1: (torch.float32, "<f4"),
    2: (torch.float64, "<f8"),
    3: (torch.int64, "<i8"),
    4: (torch.uint8, "|u1"),
    5: (torch.float16, "<f2"),
    6: (torch.int32, "<i4"),
    7: (torch.bool, "|b1"),
}
_DTYPE_CODES = {td: code for code, (td, _) in _DTYPES.items()}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_checkpoint(meta: Dict[str, Any], tensors: Dict[str, torch.Tensor], version: int = FORMAT_VERSION) -> bytes:
    meta_bytes = canonical_json(meta).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", version, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        code = _DTYPE_CODES[t.dtype]
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", code, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(t.numpy().astype(_DTYPES[code][1], copy=False).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointIntegrityError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    if len(data) < len(MAGIC) + DIGEST_SIZE or not data.startswith(MAGIC):
        raise CheckpointIntegrityError("not a vivat checkpoint (bad magic)")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError("checksum mismatch: checkpoint is corrupt or truncated")

    r = _Reader(body)
    r.take(len(MAGIC))
    version, meta_len = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(found=version, supported=FORMAT_VERSION)
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointIntegrityError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        np_dtype = np.dtype(_DTYPES[code][1])
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(n * np_dtype.itemsize)
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    if r.pos != len(body):
        raise CheckpointIntegrityError("trailing bytes after tensor table")
    return meta, tensors


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.2, min=0.2, max=2),
    retry=retry_if_exception_type(PermissionError),
    reraise=True,
)
def _replace(src: Path, dst: Path) -> None:
    os.replace(src, dst)


def write_checkpoint(path: str | Path, meta: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> Path:
    """Atomic: the payload goes to a temp file in the same directory, then replaces ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(meta, tensors))
        f.flush()
        os.fsync(f.fileno())
    _replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def tensors_sha256(tensors: Dict[str, torch.Tensor]) -> str:
    """Order-independent fingerprint of a parameter collection."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("ascii"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()
