"""Binary framing for everything that crosses a socket.

Frame layout (little-endian, no inter-frame padding)::

    offset  size  field
    0       4     magic "NSTR"
    4       1     version (1)
    5       1     frame type: 1=Entity, 2=StreamChunk, 3=Control
    6       1     flags (bit0 = end-of-stream, chunk/control frames only)
    7       1     reserved (0)
    8       4     payload length (u32, <= 16 MiB)
    12      n     payload
    12+n    4     CRC-32C over bytes [0, 12+n)

Stream chunk payload layout (40-byte header + raw samples)::

    offset  size  field
    0       16    stream id (entity id of the owning Data entity)
    16      8     sequence (u64, 0-based, +1 per chunk per stream)
    24      8     start sample (u64, index of first sample frame)
    32      2     channel count (u16)
    34      4     samples per channel (u32)
    38      1     encoding (0 = float64 LE)
    39      1     pad (0)
    40      ...   channel_count * samples_per_channel * 8 bytes,
                  sample-major (frame 0 ch0..chN-1, frame 1 ch0.., ...)

Entity payloads are canonical entity documents (see model); control
payloads are compact JSON command documents. Everything here is
stateless and thread-safe; FrameDecoder instances hold per-connection
reassembly state and belong to a single consumer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

try:
    from nstore._crc32c import crc32c
except ImportError:  # pragma: no cover - build without the extension
    def _make_table() -> list[int]:
        table = []
        for n in range(256):
            c = n
            for _ in range(8):
                c = (c >> 1) ^ 0x82F63B78 if c & 1 else c >> 1
            table.append(c)
        return table

    _TABLE = _make_table()

    def crc32c(data: bytes, crc: int = 0) -> int:
        crc ^= 0xFFFFFFFF
        for b in data:
            crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
        return crc ^ 0xFFFFFFFF


MAGIC = b"NSTR"
VERSION = 1

FT_ENTITY = 1
FT_CHUNK = 2
FT_CONTROL = 3
_FRAME_TYPES = (FT_ENTITY, FT_CHUNK, FT_CONTROL)

FLAG_END_OF_STREAM = 0x01

MAX_PAYLOAD = 16 * 1024 * 1024

_HEADER = struct.Struct("<4sBBBBI")
HEADER_LEN = _HEADER.size  # 12
FRAME_OVERHEAD = HEADER_LEN + 4  # header + trailing crc

_CHUNK_HEADER = struct.Struct("<16sQQHIBx")
CHUNK_HEADER_LEN = _CHUNK_HEADER.size  # 40

ENC_FLOAT64_LE = 0
SAMPLE_BYTES = 8
MAX_CHANNELS = 65535


class WireError(Exception):
    """Base class for framing errors."""


class PayloadTooLarge(WireError):
    pass


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class BadCrc(WireError):
    pass


class Truncated(WireError):
    """Recoverable: the buffer ends before the frame does."""


class MalformedChunk(WireError):
    pass


class EmptyStreamId(WireError):
    pass


@dataclass(frozen=True)
class Frame:
    frame_type: int
    flags: int
    payload: bytes

    @property
    def end_of_stream(self) -> bool:
        return bool(self.flags & FLAG_END_OF_STREAM)


def encode_frame(frame_type: int, flags: int, payload: bytes) -> bytes:
    if frame_type not in _FRAME_TYPES:
        raise WireError(f"unknown frame type {frame_type}")
    if flags & ~FLAG_END_OF_STREAM:
        raise WireError(f"unsupported flags 0x{flags:02x}")
    if flags and frame_type == FT_ENTITY:
        raise WireError("end-of-stream flag is invalid on entity frames")
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = _HEADER.pack(MAGIC, VERSION, frame_type, flags, 0, len(payload))
    crc = crc32c(payload, crc32c(head))
    return b"".join((head, payload, struct.pack("<I", crc)))


def frame_bytes(frame: Frame) -> bytes:
    return encode_frame(frame.frame_type, frame.flags, frame.payload)


def decode_frame(buf: bytes, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame starting at ``offset``.

    Returns (frame, consumed) where consumed is the full frame length,
    so a concatenated byte stream can be scanned frame by frame. Raises
    Truncated when more bytes are needed.
    """
    view = memoryview(buf)[offset:]
    if len(view) < HEADER_LEN:
        raise Truncated(f"need {HEADER_LEN} header bytes, have {len(view)}")
    magic, version, frame_type, flags, _reserved, payload_len = _HEADER.unpack(
        view[:HEADER_LEN]
    )
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if frame_type not in _FRAME_TYPES:
        raise BadVersion(f"unknown frame type {frame_type}")
    if payload_len > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload of {payload_len} bytes exceeds {MAX_PAYLOAD}")
    total = FRAME_OVERHEAD + payload_len
    if len(view) < total:
        raise Truncated(f"need {total} bytes, have {len(view)}")
    body = view[: HEADER_LEN + payload_len]
    (want_crc,) = struct.unpack("<I", view[HEADER_LEN + payload_len : total])
    if crc32c(body) != want_crc:
        raise BadCrc("frame checksum mismatch")
    return Frame(frame_type, flags, bytes(view[HEADER_LEN : HEADER_LEN + payload_len])), total


class FrameDecoder:
    """Incremental decoder for a reliable ordered byte stream.

    feed() buffers incoming bytes; frames() yields every complete frame
    and keeps the unconsumed tail. Framing errors other than truncation
    are fatal for the stream and propagate to the caller.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)

    def frames(self):
        pos = 0
        try:
            while True:
                try:
                    frame, used = decode_frame(self._buf, pos)
                except Truncated:
                    break
                pos += used
                yield frame
        finally:
            if pos:
                del self._buf[:pos]


@dataclass(frozen=True)
class StreamChunk:
    stream_id: bytes
    sequence: int
    start_sample: int
    channel_count: int
    samples_per_channel: int
    encoding: int = ENC_FLOAT64_LE
    samples: bytes = b""

    def matrix(self) -> np.ndarray:
        """Samples as a (samples_per_channel, channel_count) float64 array."""
        arr = np.frombuffer(self.samples, dtype="<f8")
        return arr.reshape(self.samples_per_channel, self.channel_count)


def pack_chunk(chunk: StreamChunk) -> bytes:
    head = _CHUNK_HEADER.pack(
        chunk.stream_id,
        chunk.sequence,
        chunk.start_sample,
        chunk.channel_count,
        chunk.samples_per_channel,
        chunk.encoding,
    )
    return head + chunk.samples


def unpack_chunk(payload: bytes) -> StreamChunk:
    if len(payload) < CHUNK_HEADER_LEN:
        raise MalformedChunk(f"chunk payload of {len(payload)} bytes is shorter than the header")
    stream_id, sequence, start_sample, channels, spc, encoding = _CHUNK_HEADER.unpack(
        payload[:CHUNK_HEADER_LEN]
    )
    if encoding != ENC_FLOAT64_LE:
        raise MalformedChunk(f"unsupported sample encoding {encoding}")
    if channels < 1:
        raise MalformedChunk("chunk must carry at least one channel")
    want = channels * spc * SAMPLE_BYTES
    if len(payload) - CHUNK_HEADER_LEN != want:
        raise MalformedChunk(
            f"sample bytes ({len(payload) - CHUNK_HEADER_LEN}) do not match "
            f"header arithmetic ({channels} ch x {spc} x {SAMPLE_BYTES})"
        )
    return StreamChunk(stream_id, sequence, start_sample, channels, spc, encoding,
                       payload[CHUNK_HEADER_LEN:])


def chunk_samples(
    stream_id: bytes,
    samples: np.ndarray,
    max_frames_per_chunk: int,
    start_sequence: int = 0,
    start_sample: int = 0,
) -> list[StreamChunk]:
    """Split a (frames, channels) float64 matrix into ordered chunks.

    Sequences run from ``start_sequence`` and sample numbering is
    gapless from ``start_sample``; the last chunk may be short. The
    defaults describe a stream sent in a single call.
    """
    if len(stream_id) != 16:
        raise EmptyStreamId("stream id must be 16 bytes")
    if max_frames_per_chunk < 1:
        raise WireError("max_frames_per_chunk must be >= 1")
    mat = np.ascontiguousarray(samples, dtype="<f8")
    if mat.ndim != 2:
        raise WireError("samples must be a 2-D (frames, channels) matrix")
    frames, channels = mat.shape
    if not 1 <= channels <= MAX_CHANNELS:
        raise WireError(f"channel count {channels} outside [1, {MAX_CHANNELS}]")
    chunks = []
    seq = start_sequence
    sample = start_sample
    for lo in range(0, frames, max_frames_per_chunk):
        block = mat[lo : lo + max_frames_per_chunk]
        chunks.append(
            StreamChunk(
                stream_id=stream_id,
                sequence=seq,
                start_sample=sample,
                channel_count=channels,
                samples_per_channel=block.shape[0],
                samples=block.tobytes(),
            )
        )
        seq += 1
        sample += block.shape[0]
    return chunks


def end_of_stream_chunk(stream_id: bytes, sequence: int, start_sample: int,
                        channel_count: int) -> StreamChunk:
    """Empty chunk carrying only the position counters; sent with the
    end-of-stream flag to terminate boundary-less acquisition."""
    return StreamChunk(stream_id, sequence, start_sample, channel_count, 0)
