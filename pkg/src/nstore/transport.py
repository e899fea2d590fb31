"""Socket helpers for the frame protocol.

A FrameSocket wraps a connected TCP socket with incremental frame
reassembly on the read side. Control conversations are compact JSON
documents inside Control frames; the helpers here keep that convention
in one place.
"""

from __future__ import annotations

import json
import socket
from collections import deque

from nstore.model import dumps_canonical
from nstore.wire import FT_CONTROL, Frame, FrameDecoder, encode_frame


class TransportError(Exception):
    pass


class ConnectionClosed(TransportError):
    pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise TransportError(f"bad address {addr!r}, want host:port")
    return host, int(port)


class FrameSocket:
    """One connected peer; single reader, single writer at a time."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._decoder = FrameDecoder()
        self._ready: deque[Frame] = deque()

    def send_raw(self, raw: bytes) -> None:
        try:
            self.sock.sendall(raw)
        except OSError as exc:
            raise ConnectionClosed(f"send failed: {exc}") from exc

    def send_frame(self, frame_type: int, flags: int, payload: bytes) -> None:
        self.send_raw(encode_frame(frame_type, flags, payload))

    def send_control(self, doc: dict) -> None:
        self.send_frame(FT_CONTROL, 0, dumps_canonical(doc))

    def recv_frame(self, timeout: float | None = None) -> Frame | None:
        """Next frame, or None on clean EOF with nothing pending."""
        if self._ready:
            return self._ready.popleft()
        self.sock.settimeout(timeout)
        while True:
            try:
                data = self.sock.recv(256 * 1024)
            except socket.timeout as exc:
                raise TransportError("receive timed out") from exc
            except OSError as exc:
                raise ConnectionClosed(f"recv failed: {exc}") from exc
            if not data:
                if self._decoder.pending_bytes:
                    raise ConnectionClosed("peer closed mid-frame")
                return None
            self._decoder.feed(data)
            self._ready.extend(self._decoder.frames())
            if self._ready:
                return self._ready.popleft()

    def recv_control(self, timeout: float | None = None) -> dict | None:
        frame = self.recv_frame(timeout)
        if frame is None:
            return None
        if frame.frame_type != FT_CONTROL:
            raise TransportError(f"expected control frame, got type {frame.frame_type}")
        return parse_control(frame)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_control(frame: Frame) -> dict:
    try:
        doc = json.loads(frame.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TransportError(f"bad control payload: {exc}") from exc
    if not isinstance(doc, dict) or "op" not in doc:
        raise TransportError("control payload must be an object with an 'op'")
    return doc


def connect(addr: str, timeout: float = 5.0) -> FrameSocket:
    host, port = parse_addr(addr)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {addr}: {exc}") from exc
    sock.settimeout(None)
    return FrameSocket(sock)
