"""Streaming sender: entities and sample chunks over the ingest port.

One Sender is one connection, used by one thread at a time. Every
frame is acknowledged by the broker after durable append; the sender
therefore knows exactly which chunk was accepted last and, after a
reconnect, resumes from there — per-stream sequence numbers stay
gapless and monotone no matter how often the link drops.
"""

from __future__ import annotations

import socket
import time

import numpy as np

from nstore_client import wire
from nstore_client.documents import Entity
from nstore_client.errors import (
    BrokerUnavailable,
    ChannelMismatch,
    ProtocolError,
    StreamClosed,
    ValidationError,
)


class _StreamState:
    __slots__ = ("channels", "next_sequence", "next_sample", "closed")

    def __init__(self, channels: int):
        self.channels = channels
        self.next_sequence = 0
        self.next_sample = 0
        self.closed = False


class Sender:
    def __init__(self, broker_addr: str, connect_timeout: float = 5.0,
                 ack_timeout: float = 30.0, max_retries: int = 5,
                 frames_per_chunk: int = 250):
        host, _, port = broker_addr.rpartition(":")
        if not host or not port.isdigit():
            raise ValidationError(f"broker address must be host:port, got {broker_addr!r}")
        self._addr = (host, int(port))
        self.connect_timeout = connect_timeout
        self.ack_timeout = ack_timeout
        self.max_retries = max_retries
        self.frames_per_chunk = frames_per_chunk
        self._sock: socket.socket | None = None
        self._reader: wire.FrameReader | None = None
        self._streams: dict[str, _StreamState] = {}
        self._connect()

    # -- connection --------------------------------------------------------

    def _connect(self) -> None:
        delay = 0.1
        last: Exception | None = None
        for _ in range(self.max_retries):
            try:
                sock = socket.create_connection(self._addr, timeout=self.connect_timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._sock = sock
                self._reader = wire.FrameReader(sock)
                return
            except OSError as exc:
                last = exc
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
        raise BrokerUnavailable(f"cannot connect to {self._addr[0]}:{self._addr[1]}: {last}")

    def _drop_connection(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self._reader = None

    def _send_acked(self, raw_frame: bytes) -> dict:
        """Send one frame and wait for its ack, reconnecting and
        resending if the link drops. The broker deduplicates replays,
        so a resend after a lost ack is harmless."""
        attempts = 0
        while True:
            if self._sock is None:
                self._connect()
            try:
                self._sock.sendall(raw_frame)
                frame = self._reader.next_frame(timeout=self.ack_timeout)
                if frame is None:
                    raise OSError("connection closed awaiting ack")
                doc = wire.parse_control(frame)
                if doc.get("op") == "error":
                    code = doc.get("code", "")
                    if code in ("queue_full", "shutdown"):
                        raise BrokerUnavailable(f"{code}: {doc.get('message', '')}")
                    raise ProtocolError(f"{code}: {doc.get('message', '')}")
                if doc.get("op") != "ack":
                    raise ProtocolError(f"expected ack, got {doc.get('op')!r}")
                return doc
            except (OSError, socket.timeout) as exc:
                self._drop_connection()
                attempts += 1
                if attempts >= self.max_retries:
                    raise BrokerUnavailable(f"send failed after {attempts} attempts: {exc}")
                time.sleep(min(0.1 * 2**attempts, 2.0))

    # -- public API ----------------------------------------------------

    def send_entity(self, entity: Entity) -> str:
        """Validate locally, publish, return the acknowledged id."""
        if not isinstance(entity, Entity):
            raise ValidationError("send_entity takes an Entity")
        payload = entity.encode()  # construction already validated it
        ack = self._send_acked(wire.encode_frame(wire.FT_ENTITY, 0, payload))
        if ack.get("id") != entity.id:
            raise ProtocolError(f"broker acked id {ack.get('id')!r}, sent {entity.id}")
        if entity.topic == "Data":
            self._streams.setdefault(entity.id, _StreamState(channels=0))
        return entity.id

    def send_samples(self, stream_id: str, samples) -> list[dict]:
        """Chunk and stream a (frames, channels) float64 matrix.

        The stream's Data entity must have been sent through this
        Sender first; the channel count is fixed by the first call.
        """
        state = self._stream(stream_id)
        if state.closed:
            raise StreamClosed(f"stream {stream_id} was ended")
        mat = np.ascontiguousarray(samples, dtype="<f8")
        if mat.ndim != 2 or mat.shape[0] < 1:
            raise ValidationError("samples must be a non-empty (frames, channels) matrix")
        channels = mat.shape[1]
        if not 1 <= channels <= 65535:
            raise ValidationError(f"channel count {channels} outside [1, 65535]")
        if state.channels == 0:
            state.channels = channels
        elif channels != state.channels:
            raise ChannelMismatch(
                f"stream {stream_id} carries {state.channels} channels, matrix has {channels}"
            )
        acks = []
        sid = bytes.fromhex(stream_id)
        for lo in range(0, mat.shape[0], self.frames_per_chunk):
            block = mat[lo : lo + self.frames_per_chunk]
            payload = wire.pack_chunk(
                sid, state.next_sequence, state.next_sample,
                channels, block.shape[0], block.tobytes(),
            )
            ack = self._send_acked(wire.encode_frame(wire.FT_CHUNK, 0, payload))
            if ack.get("seq") != state.next_sequence:
                raise ProtocolError(
                    f"broker acked sequence {ack.get('seq')}, sent {state.next_sequence}"
                )
            state.next_sequence += 1
            state.next_sample += block.shape[0]
            acks.append(ack)
        return acks

    def end_stream(self, stream_id: str) -> dict:
        """Terminate a boundary-less stream with the end-of-stream flag."""
        state = self._stream(stream_id)
        if state.closed:
            raise StreamClosed(f"stream {stream_id} was ended")
        payload = wire.pack_chunk(
            bytes.fromhex(stream_id), state.next_sequence, state.next_sample,
            max(state.channels, 1), 0, b"",
        )
        ack = self._send_acked(
            wire.encode_frame(wire.FT_CHUNK, wire.FLAG_END_OF_STREAM, payload)
        )
        state.closed = True
        state.next_sequence += 1
        return ack

    def _stream(self, stream_id: str) -> _StreamState:
        state = self._streams.get(stream_id)
        if state is None:
            raise ValidationError(
                f"stream {stream_id}: send its Data entity through this Sender first"
            )
        return state

    def ping(self) -> bool:
        if self._sock is None:
            self._connect()
        self._sock.sendall(wire.encode_frame(wire.FT_CONTROL, 0, wire.control_doc({"op": "ping"})))
        frame = self._reader.next_frame(timeout=self.ack_timeout)
        return frame is not None and wire.parse_control(frame).get("op") == "pong"

    def close(self) -> None:
        self._drop_connection()

    def __enter__(self) -> "Sender":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
