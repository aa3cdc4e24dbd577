"""
DKCP checkpoint files.

Layout (little-endian):

    b"DKCP"
    u32 format version
    u32 length + UTF-8 JSON config
    per tensor: u32 length + UTF-8 name, u32 rank, rank × u64 dims, f64 payload
    u32 CRC32 of every byte between the magic and the checksum

The checksum is verified before anything is decoded, so a damaged file never
yields a partial load.
"""
import json
import logging
import os
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from deltaKit.core.exceptions import (
    CheckpointConfigMismatchError,
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
)
from deltaKit.core.numerics import DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"DKCP"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = np.dtype("<f8")


@dataclass(frozen=True)
class CheckpointHeader:
    version: int
    config: Dict[str, Any]
    tensors: List[Tuple[str, Tuple[int, ...]]]


@contextmanager
def atomic_write(path: str):
    """Write to a sibling temp file and move it into place only on success."""
    tmp_path = f"{path}.tmp"
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle = open(tmp_path, "wb")
    try:
        yield handle
        handle.close()
        os.replace(tmp_path, path)
    except Exception:
        handle.close()
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode(params: Dict[str, np.ndarray], config: Dict[str, Any]) -> bytes:
    chunks = [_U32.pack(FORMAT_VERSION), _pack_str(json.dumps(config, sort_keys=True))]
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype=_F64)
        chunks.append(_pack_str(name))
        chunks.append(_U32.pack(arr.ndim))
        chunks.extend(_U64.pack(n) for n in arr.shape)
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    return MAGIC + body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(params: Dict[str, np.ndarray], config: Dict[str, Any], path: str) -> str:
    """Write `params` and a JSON-serializable `config` atomically; returns the path."""
    data = encode(params, config)
    with atomic_write(path) as handle:
        handle.write(data)
    logger.info(f"Checkpoint saved: {path} ({len(params)} tensors, {len(data)} bytes)")
    return path


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.body):
            raise CheckpointCorruptError("checkpoint truncated", [{"field": "body", "error": "unexpected end"}])
        chunk = self.body[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    @property
    def done(self) -> bool:
        return self.offset == len(self.body)


def _verified_body(path: str) -> bytes:
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}", [{"field": "path", "error": "missing"}]) from None
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path} is not a DKCP checkpoint", [{"field": "magic", "error": "bad magic"}])
    body, stored = data[len(MAGIC):-4], _U32.unpack(data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CheckpointCorruptError(f"checksum mismatch in {path}", [{"field": "crc32", "error": "mismatch"}])
    return body


def _decode(body: bytes, with_payload: bool):
    reader = _Reader(body)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})",
                                     [{"field": "version", "error": str(version)}])
    try:
        config = json.loads(reader.text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable config blob: {exc}") from exc
    tensors, index = {}, []
    while not reader.done:
        name = reader.text()
        shape = tuple(reader.u64() for _ in range(reader.u32()))
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * _F64.itemsize)
        index.append((name, shape))
        if with_payload:
            tensors[name] = np.frombuffer(raw, dtype=_F64).astype(DTYPE).reshape(shape)
    return version, config, tensors, index


def read_header(path: str) -> CheckpointHeader:
    """Version, config and tensor names/shapes without materializing the payloads."""
    version, config, _, index = _decode(_verified_body(path), with_payload=False)
    return CheckpointHeader(version=version, config=config, tensors=index)


def load_checkpoint(path: str, expected_model: Optional[Dict[str, Any]] = None
                    ) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Load parameters and config.

    Args:
        path: Checkpoint file.
        expected_model: Model config the caller intends to load into; any
            differing field raises CheckpointConfigMismatchError.
    """
    _, config, tensors, _ = _decode(_verified_body(path), with_payload=True)
    if expected_model is not None:
        stored = config.get("model", {})
        diffs = [{"field": key, "error": f"checkpoint has {stored.get(key)!r}, expected {value!r}"}
                 for key, value in expected_model.items() if stored.get(key) != value]
        if diffs:
            raise CheckpointConfigMismatchError(f"checkpoint {path} was written for a different model", diffs)
    logger.debug(f"Checkpoint loaded: {path} ({len(tensors)} tensors)")
    return tensors, config
