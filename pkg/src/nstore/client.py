"""In-repo clients for the broker's TCP surfaces.

Publisher speaks the ingest listener (frames out, acks back);
RemoteBroker mirrors the in-process consumer API over the admin port so
persist workers and the bench harness behave identically whether the
broker is local or remote.
"""

from __future__ import annotations

import threading

from nstore import wire
from nstore.broker import OffsetBeyondHead, QueueFull, QueueRecord, Shutdown, UnknownPartition
from nstore.transport import FrameSocket, TransportError, connect


class ClientError(Exception):
    pass


class ServerSideError(ClientError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


_ERROR_MAP = {
    "queue_full": QueueFull,
    "shutdown": Shutdown,
    "UnknownPartition": UnknownPartition,
    "OffsetBeyondHead": OffsetBeyondHead,
}


def _raise_for(doc: dict) -> None:
    if doc.get("op") == "error":
        exc = _ERROR_MAP.get(doc.get("code", ""))
        if exc is not None:
            raise exc(doc.get("message", ""))
        raise ServerSideError(doc.get("code", "unknown"), doc.get("message", ""))


class Publisher:
    """One ingest connection; synchronous publish with per-frame acks."""

    def __init__(self, addr: str, timeout: float = 10.0):
        self.addr = addr
        self.timeout = timeout
        self._fs = connect(addr, timeout)
        self._lock = threading.Lock()

    def publish_raw(self, raw_frame: bytes) -> dict:
        with self._lock:
            self._fs.send_raw(raw_frame)
            doc = self._fs.recv_control(timeout=self.timeout)
        if doc is None:
            raise TransportError("broker closed the ingest connection")
        _raise_for(doc)
        if doc.get("op") != "ack":
            raise ClientError(f"expected ack, got {doc.get('op')!r}")
        return doc

    def publish_entity(self, doc_bytes: bytes) -> dict:
        return self.publish_raw(wire.encode_frame(wire.FT_ENTITY, 0, doc_bytes))

    def publish_chunk(self, chunk: wire.StreamChunk, end_of_stream: bool = False) -> dict:
        flags = wire.FLAG_END_OF_STREAM if end_of_stream else 0
        return self.publish_raw(wire.encode_frame(wire.FT_CHUNK, flags, wire.pack_chunk(chunk)))

    def ping(self) -> bool:
        with self._lock:
            self._fs.send_control({"op": "ping"})
            doc = self._fs.recv_control(timeout=self.timeout)
        return doc is not None and doc.get("op") == "pong"

    def close(self) -> None:
        self._fs.close()


class RemoteBroker:
    """Consumer-side view of a broker over its admin port.

    Implements the same fetch/commit/committed/head/stats surface as
    the in-process Broker, so the persist engine can be pointed at
    either.
    """

    def __init__(self, admin_addr: str, partitions: int | None = None, timeout: float = 10.0):
        self.addr = admin_addr
        self.timeout = timeout
        self._fs = connect(admin_addr, timeout)
        self._lock = threading.Lock()
        if partitions is None:
            partitions = int(self.stats()["partitions"])
        self.partition_count = partitions

    def _call(self, doc: dict) -> dict:
        with self._lock:
            self._fs.send_control(doc)
            reply = self._fs.recv_control(timeout=self.timeout)
        if reply is None:
            raise TransportError("broker closed the admin connection")
        _raise_for(reply)
        return reply

    def fetch(self, group: str, partition: int, from_offset: int, max_records: int):
        reply = self._call(
            {"op": "fetch", "group": group, "partition": partition,
             "from": from_offset, "max": max_records}
        )
        return [
            QueueRecord(
                partition=partition,
                offset=int(r["offset"]),
                key=bytes.fromhex(r["key"]),
                enqueued_at=int(r["enqueued_us"]),
                frame_bytes=bytes.fromhex(r["frame"]),
            )
            for r in reply["records"]
        ]

    def commit(self, group: str, partition: int, offset: int) -> None:
        self._call({"op": "commit", "group": group, "partition": partition, "offset": offset})

    def committed(self, group: str, partition: int) -> int:
        return int(self._call({"op": "committed", "group": group, "partition": partition})["offset"])

    def head(self, partition: int) -> int:
        return int(self._call({"op": "head", "partition": partition})["offset"])

    def stats(self) -> dict:
        doc = self._call({"op": "stats"})
        return {k: v for k, v in doc.items() if k != "op"}

    def wait_for_data(self, group: str, timeout: float) -> None:
        # remote consumers poll; the timeout doubles as the poll interval
        threading.Event().wait(timeout)

    def close(self) -> None:
        self._fs.close()
