# storage.py
"""
Binary containers used on disk.

Feature file (one per video):
    magic b"VADF" | version u32 | N u32 | D u32 | N*D float64, row-major
Checkpoint:
    magic b"VADC" | version u32 | meta_len u32 | meta (UTF-8 JSON)
    | count u32 | count x [name_len u32 | name | dtype u8 | ndim u32 | dims u32* | float64 data]
All integers and floats are little-endian.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from errors import IngestionError, StorageError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FEATURE_MAGIC = b"VADF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

CHECKPOINT_MAGIC = b"VADC"
CHECKPOINT_VERSION = 1
DTYPE_F64 = 1
_U32 = struct.Struct("<I")


# -----------------------------------
# Feature files
# -----------------------------------
def encode_features(matrix: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(matrix, dtype="<f8")
    if arr.ndim != 2:
        raise StorageError(f"feature matrix must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d) + arr.tobytes()


def write_feature_file(path: PathLike, matrix: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_features(matrix))
    except OSError as e:
        raise StorageError(f"Cannot write feature file {path}: {e}") from e


def read_feature_file(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Feature file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise IngestionError(f"Feature file {path} is truncated (no header)")
    magic, version, n, d = _FEATURE_HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise IngestionError(f"Feature file {path} has bad magic bytes {magic!r}")
    if version != FEATURE_VERSION:
        raise IngestionError(f"Feature file {path} has unsupported version {version}")
    payload = len(blob) - _FEATURE_HEADER.size
    if payload != n * d * 8:
        raise IngestionError(
            f"Feature file {path}: header says {n}x{d} ({n * d * 8} bytes) but payload has {payload} bytes"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=_FEATURE_HEADER.size, count=n * d)
    return data.reshape(n, d).astype(np.float64)


# -----------------------------------
# Manifest (UTF-8 JSON array)
# -----------------------------------
def write_manifest(path: PathLike, entries: List[Dict[str, Any]]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Cannot write manifest {path}: {e}") from e


def read_manifest(path: PathLike) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Manifest not found: {path}")
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IngestionError(f"Manifest {path} is not valid UTF-8 JSON: {e}") from e
    if not isinstance(entries, list):
        raise IngestionError(f"Manifest {path} must be a JSON array")
    for i, entry in enumerate(entries):
        missing = [k for k in ("id", "path", "bag_label") if k not in entry]
        if missing:
            raise IngestionError(f"Manifest {path} entry {i} is missing {missing}")
    return entries


# -----------------------------------
# Checkpoint container
# -----------------------------------
def encode_checkpoint(tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(meta_bytes)), meta_bytes]
    parts.append(_U32.pack(len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        parts.append(_U32.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(dim) for dim in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        if blob[:4] != CHECKPOINT_MAGIC:
            raise StorageError(f"{source} is not a checkpoint (bad magic)")
        pos = 4
        (version,) = _U32.unpack_from(blob, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise StorageError(f"{source}: unsupported checkpoint version {version}")
        (meta_len,) = _U32.unpack_from(blob, pos)
        pos += 4
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = _U32.unpack_from(blob, pos)
        pos += 4
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = _U32.unpack_from(blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (dtype,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if dtype != DTYPE_F64:
                raise StorageError(f"{source}: tensor {name!r} has unknown dtype code {dtype}")
            (ndim,) = _U32.unpack_from(blob, pos)
            pos += 4
            shape = tuple(_U32.unpack_from(blob, pos + 4 * i)[0] for i in range(ndim))
            pos += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            if pos + size * 8 > len(blob):
                raise StorageError(f"{source}: tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(blob, dtype="<f8", offset=pos, count=size).reshape(shape).astype(np.float64)
            pos += size * 8
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"{source}: corrupt checkpoint ({e})") from e
    return tensors, meta


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(tensors, meta))
    except OSError as e:
        raise StorageError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info("Checkpoint written: %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
