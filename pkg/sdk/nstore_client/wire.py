"""Frame codec implementing the published wire contract.

Layouts follow docs/wire.md of the service: 16-byte-overhead frames
(magic NSTR, version 1, type, flags, u32le payload length, CRC-32C
trailer) and 40-byte chunk headers followed by float64 LE samples in
sample-major order. Golden vectors shipped with the service pin this
module byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

MAGIC = b"NSTR"
VERSION = 1

FT_ENTITY = 1
FT_CHUNK = 2
FT_CONTROL = 3

FLAG_END_OF_STREAM = 0x01
MAX_PAYLOAD = 16 * 1024 * 1024

_HEADER = struct.Struct("<4sBBBBI")
_CHUNK_HEADER = struct.Struct("<16sQQHIBx")
FRAME_OVERHEAD = _HEADER.size + 4
CHUNK_HEADER_LEN = _CHUNK_HEADER.size


class WireError(Exception):
    pass


class Truncated(WireError):
    """Need more bytes; not an error on a live socket."""


def _make_crc_table() -> list[int]:
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ 0x82F63B78 if c & 1 else c >> 1
        table.append(c)
    return table


_CRC_TABLE = _make_crc_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    table = _CRC_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


@dataclass(frozen=True)
class Frame:
    frame_type: int
    flags: int
    payload: bytes

    @property
    def end_of_stream(self) -> bool:
        return bool(self.flags & FLAG_END_OF_STREAM)


def encode_frame(frame_type: int, flags: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise WireError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = _HEADER.pack(MAGIC, VERSION, frame_type, flags, 0, len(payload))
    crc = crc32c(payload, crc32c(head))
    return head + payload + struct.pack("<I", crc)


def decode_frame(buf: bytes, offset: int = 0) -> tuple[Frame, int]:
    # plain byte slices: no memoryview may outlive this call, because
    # callers reassemble into a bytearray they need to keep resizable
    data = bytes(buf[offset:]) if not isinstance(buf, bytes) or offset else buf
    if len(data) < _HEADER.size:
        raise Truncated("short header")
    magic, version, frame_type, flags, _pad, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise WireError("declared payload too large")
    total = FRAME_OVERHEAD + length
    if len(data) < total:
        raise Truncated("short frame")
    (want,) = struct.unpack_from("<I", data, _HEADER.size + length)
    if crc32c(data[: _HEADER.size + length]) != want:
        raise WireError("frame checksum mismatch")
    return Frame(frame_type, flags, data[_HEADER.size : _HEADER.size + length]), total


def pack_chunk(stream_id: bytes, sequence: int, start_sample: int,
               channel_count: int, samples_per_channel: int, samples: bytes) -> bytes:
    if len(samples) != channel_count * samples_per_channel * 8:
        raise WireError("sample bytes do not match the chunk shape")
    head = _CHUNK_HEADER.pack(stream_id, sequence, start_sample,
                              channel_count, samples_per_channel, 0)
    return head + samples


def control_doc(doc: dict) -> bytes:
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_control(frame: Frame) -> dict:
    if frame.frame_type != FT_CONTROL:
        raise WireError(f"expected a control frame, got type {frame.frame_type}")
    try:
        doc = json.loads(frame.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"bad control payload: {exc}") from exc
    if not isinstance(doc, dict) or "op" not in doc:
        raise WireError("control payload must be an object with an 'op'")
    return doc


class FrameReader:
    """Reassembles frames from a socket's byte stream."""

    def __init__(self, sock):
        self._sock = sock
        self._buf = bytearray()

    def next_frame(self, timeout: float | None = None) -> Frame | None:
        self._sock.settimeout(timeout)
        while True:
            try:
                frame, used = decode_frame(self._buf)
            except Truncated:
                data = self._sock.recv(256 * 1024)
                if not data:
                    if self._buf:
                        raise WireError("connection closed mid-frame")
                    return None
                self._buf.extend(data)
                continue
            del self._buf[:used]
            return frame
