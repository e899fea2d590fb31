"""Write-ahead log entries and their on-disk framing.

Each entry is stored as ``[u32le body_len][body][u32le crc32c(body)]``
where the body is the canonical JSON of ``{"lsn", "op", "payload"}``.
LSNs are dense from 1 and an entry applies deterministically, which is
what lets the same byte stream drive recovery on the primary and
catch-up on replicas.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterator

from nstore.model import dumps_canonical
from nstore.wire import crc32c

OP_INSERT_ENTITY = "insert_entity"
OP_INSERT_ATTRIBUTE = "insert_attribute"
OP_INSERT_RELATION = "insert_relation"
OP_DELETE_ENTITY = "delete_entity"
_OPS = {OP_INSERT_ENTITY, OP_INSERT_ATTRIBUTE, OP_INSERT_RELATION, OP_DELETE_ENTITY}

_LEN = struct.Struct("<I")
MAX_ENTRY_BYTES = 64 * 1024 * 1024


class WalError(Exception):
    pass


class CrcMismatch(WalError):
    pass


class LsnGap(WalError):
    pass


@dataclass(frozen=True)
class WalEntry:
    lsn: int
    op: str
    payload: dict

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise WalError(f"unknown wal op {self.op!r}")
        if self.lsn < 1:
            raise WalError("lsn must be >= 1")


def encode_entry(entry: WalEntry) -> bytes:
    body = dumps_canonical({"lsn": entry.lsn, "op": entry.op, "payload": entry.payload})
    return _LEN.pack(len(body)) + body + _LEN.pack(crc32c(body))


def decode_entry(raw: bytes) -> WalEntry:
    """Decode one framed entry (exact bytes, as shipped to replicas)."""
    if len(raw) < 8:
        raise WalError("entry shorter than framing")
    (body_len,) = _LEN.unpack_from(raw, 0)
    if len(raw) != body_len + 8:
        raise WalError("entry length mismatch")
    body = raw[4 : 4 + body_len]
    (want,) = _LEN.unpack_from(raw, 4 + body_len)
    if crc32c(body) != want:
        raise CrcMismatch("wal entry checksum mismatch")
    doc = json.loads(body.decode("utf-8"))
    return WalEntry(doc["lsn"], doc["op"], doc["payload"])


class WalWriter:
    """Append-only writer; one per store, single-threaded by contract."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self._f = open(path, "ab", buffering=0)

    def append(self, entry: WalEntry) -> bytes:
        raw = encode_entry(entry)
        self._f.write(raw)
        return raw

    def append_raw(self, raw: bytes) -> None:
        self._f.write(raw)

    def fsync(self) -> None:
        os.fsync(self._f.fileno())

    def close(self) -> None:
        try:
            self._f.flush()
            os.fsync(self._f.fileno())
        finally:
            self._f.close()


def scan(path: str) -> tuple[list[WalEntry], int, list[bytes]]:
    """Read every complete, checksummed entry.

    Returns (entries, valid_bytes, raw_frames). A torn or corrupt tail
    simply ends the scan; ``valid_bytes`` is where a recovering writer
    should truncate.
    """
    entries: list[WalEntry] = []
    raws: list[bytes] = []
    valid = 0
    if not os.path.exists(path):
        return entries, valid, raws
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    expected_lsn = 1
    while len(data) - pos >= 8:
        (body_len,) = _LEN.unpack_from(data, pos)
        if body_len > MAX_ENTRY_BYTES or len(data) - pos < body_len + 8:
            break
        raw = data[pos : pos + body_len + 8]
        try:
            entry = decode_entry(raw)
        except WalError:
            break
        if entry.lsn != expected_lsn:
            raise LsnGap(f"wal at byte {pos}: lsn {entry.lsn}, expected {expected_lsn}")
        entries.append(entry)
        raws.append(raw)
        valid = pos + body_len + 8
        pos = valid
        expected_lsn += 1
    return entries, valid, raws


def truncate_to(path: str, valid_bytes: int) -> None:
    size = os.path.getsize(path) if os.path.exists(path) else 0
    if size > valid_bytes:
        with open(path, "r+b") as f:
            f.truncate(valid_bytes)


def iter_entries(raws: list[bytes]) -> Iterator[WalEntry]:
    for raw in raws:
        yield decode_entry(raw)
