"""
Binary checkpoint container.

Layout, all integers little-endian::

    b"LISA" | version u32 | header length u32 | header JSON (utf-8)
    | array count u32 | per array: name length u32, name utf-8, ndim u32,
      ndim x u64 dims, float64 data (little-endian, C order)
"""

import json
import logging
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from langskill.errors import CheckpointError

MAGIC = b"LISA"
FORMAT_VERSION = 1
# headroom kept free on the target disk
DISK_MARGIN_BYTES = 16 * 1024 * 1024

log = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """Parsed checkpoint: JSON header (config echo, RNG states, last loss) and named arrays."""

    header: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> Dict[str, Any]:
        return self.header.get("config", {})

    @property
    def has_codebook(self) -> bool:
        return "codebook.vectors" in self.arrays


def encode(header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        values = np.ascontiguousarray(arrays[name], dtype="<f8")
        name_bytes = name.encode()
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(values.tobytes())
    return b"".join(parts)


def decode(payload: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    :raises CheckpointError: If the magic, version or lengths are wrong
    """
    view = memoryview(payload)
    offset = 0

    def take(size: int) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointError(f"checkpoint truncated at byte {offset}")
        chunk = view[offset : offset + size]
        offset += size
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, header_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(bytes(take(header_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"unreadable checkpoint header: {error}") from error
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64).reshape(shape)
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after the last array")
    return Checkpoint(header=header, arrays=arrays)


def check_disk_space(path: Path, required_bytes: int) -> None:
    """
    Raise before writing when the target disk cannot hold ``required_bytes``.

    :raises OSError: If free space is insufficient
    """
    free = shutil.disk_usage(Path(path).parent).free
    log.debug(f"available disk space = {free / 1024**3:.1f} [GB]")
    if free < required_bytes + DISK_MARGIN_BYTES:
        log.warning(f"not enough disk space for {path}")
        raise OSError(f"not enough disk space for {path}: {free} bytes free, {required_bytes} needed")


def save_checkpoint(path: Path, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> int:
    """
    Write a checkpoint atomically.

    :return: Bytes written
    :rtype: int
    """
    path = Path(path)
    payload = encode(header, arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    check_disk_space(path, len(payload))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    log.info(f"saved checkpoint {path} ({len(payload) / 1024**2:.2f} [MB])")
    return len(payload)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode(path.read_bytes())
