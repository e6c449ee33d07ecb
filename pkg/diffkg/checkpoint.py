"""Flat binary checkpoint format for named float arrays.

Layout (all integers little-endian)::

    magic      4 bytes   b"DKGC"
    version    uint32    FORMAT_VERSION
    count      uint32    number of entries
    entries    count x entry

    entry:
    name_len   uint32
    name       name_len bytes, UTF-8
    width      uint8     4 (float32) or 8 (float64)
    rank       uint32
    dims       rank x uint64
    payload    prod(dims) x width bytes, little-endian IEEE floats

Entries are written in the order given, so saving the same mapping twice
yields identical bytes.  Loading parses the whole file before returning;
a truncated or malformed file raises :class:`CheckpointError` and hands
back nothing.
"""

from __future__ import annotations

import logging
import os
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DKGC"
FORMAT_VERSION = 1

_WIDTHS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(OSError):
    """Raised when a checkpoint cannot be written or read back."""


def save_checkpoint(path: Path | str, entries: Mapping[str, np.ndarray]) -> None:
    """Write *entries* to *path* atomically (temp file, then rename)."""
    path = Path(path)
    chunks: list[bytes] = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, value in entries.items():
        array = np.asarray(value)
        if array.dtype.itemsize not in _WIDTHS or array.dtype.kind != "f":
            array = array.astype(np.float64)
        width = array.dtype.itemsize
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", width, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_WIDTHS[width]).tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with tmp.open("wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"Failed to write checkpoint {path}: {exc}") from exc
    logger.debug(
        "Wrote %d checkpoint entries to %s",
        len(entries),
        path,
        extra={"event": "checkpoint_written"},
    )


class _Reader:
    def __init__(self, buffer: bytes, path: Path) -> None:
        self._buffer = buffer
        self._offset = 0
        self._path = path

    def take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._buffer):
            raise CheckpointError(
                f"Checkpoint {self._path} is truncated at byte {self._offset} "
                f"(needed {size} more bytes)"
            )
        chunk = self._buffer[self._offset:end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._buffer)


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    """Read every entry of the checkpoint at *path*.

    Raises:
        CheckpointError: if the file is missing, truncated, carries trailing
            bytes, or was written by a different format version.
    """
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc

    reader = _Reader(buffer, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
        )

    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"Checkpoint {path} has a malformed entry name") from exc
        width, rank = reader.unpack("<BI")
        if width not in _WIDTHS:
            raise CheckpointError(f"Entry {name!r} in {path} has unsupported float width {width}")
        dims = reader.unpack(f"<{rank}Q")
        count_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(count_values * width)
        entries[name] = np.frombuffer(payload, dtype=_WIDTHS[width]).reshape(dims).copy()

    if not reader.exhausted:
        raise CheckpointError(f"Checkpoint {path} has trailing bytes after {count} entries")
    return entries
