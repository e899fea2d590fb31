"""Durable partitioned queue between senders and the persist workers.

Records are appended to per-partition segment files; a record's key
(stream id for chunks, entity id for entity frames) hashes to a fixed
partition, which is what gives per-stream FIFO while partitions drain
in parallel. Delivery is at-least-once: consumer groups commit offsets,
and after a crash everything past the commit is simply redelivered.

Segment record layout::

    [u32le body_len][body][u32le crc32c(body)]
    body = [u64le offset][u64le enqueued_at_us][16s key][frame bytes]

Appends hit the OS before publish returns (kill-safe); fsync runs in
the background every ``fsync_interval_ms`` or 8 MiB per partition,
whichever comes first. A torn tail from a crash is truncated on open.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass

from nstore import wire
from nstore.transport import FrameSocket, TransportError, parse_addr, parse_control
from nstore.wire import FT_CHUNK, FT_CONTROL, FT_ENTITY, Frame, crc32c

log = logging.getLogger("nstore.broker")

_LEN = struct.Struct("<I")
_BODY_HEAD = struct.Struct("<QQ16s")  # offset, enqueued_us, key
_RECORD_OVERHEAD = 4 + _BODY_HEAD.size + 4
_MAX_BODY = wire.MAX_PAYLOAD + wire.FRAME_OVERHEAD + _BODY_HEAD.size
_FSYNC_BYTES = 8 * 1024 * 1024


class BrokerError(Exception):
    pass


class QueueFull(BrokerError):
    pass


class Shutdown(BrokerError):
    pass


class UnknownPartition(BrokerError):
    pass


class OffsetBeyondHead(BrokerError):
    pass


@dataclass(frozen=True)
class QueueRecord:
    partition: int
    offset: int
    key: bytes
    enqueued_at: int  # µs
    frame_bytes: bytes

    def frame(self) -> Frame:
        frame, _ = wire.decode_frame(self.frame_bytes)
        return frame


class PartitionLog:
    """Append-only segment files for one partition."""

    def __init__(self, root: str, partition: int, segment_bytes: int):
        self.partition = partition
        self.segment_bytes = max(segment_bytes, 1024)
        self.dir = os.path.join(root, f"p{partition:02d}")
        os.makedirs(self.dir, exist_ok=True)
        self._lock = threading.Lock()
        # (base_offset, path, [byte positions]); dense offsets make the
        # position lists directly indexable
        self._segments: list[tuple[int, str, list[int]]] = []
        self._read_fds: dict[str, object] = {}
        self.head = 0
        self.bytes_total = 0
        self._dirty_bytes = 0
        self._recover()
        if not self._segments:
            self._roll(0)
        last = self._segments[-1]
        self._append_f = open(last[1], "ab", buffering=0)
        self._append_size = os.path.getsize(last[1])

    # -- recovery ---------------------------------------------------------

    def _recover(self) -> None:
        names = sorted(n for n in os.listdir(self.dir) if n.endswith(".seg"))
        expected = 0
        for i, name in enumerate(names):
            path = os.path.join(self.dir, name)
            base = int(name[: -len(".seg")])
            positions, valid, next_offset = self._scan_segment(path, base)
            if base != expected:
                raise BrokerError(
                    f"partition {self.partition}: segment {name} starts at {base}, "
                    f"expected {expected}"
                )
            size = os.path.getsize(path)
            if valid < size:
                if i != len(names) - 1:
                    raise BrokerError(
                        f"partition {self.partition}: corrupt record inside {name}"
                    )
                log.warning(
                    "partition %d: truncating torn tail of %s (%d -> %d bytes)",
                    self.partition, name, size, valid,
                )
                with open(path, "r+b") as f:
                    f.truncate(valid)
            self._segments.append((base, path, positions))
            self.bytes_total += valid
            expected = next_offset
        self.head = expected

    def _scan_segment(self, path: str, base: int) -> tuple[list[int], int, int]:
        positions: list[int] = []
        valid = 0
        offset = base
        with open(path, "rb") as f:
            data = f.read()
        pos = 0
        while len(data) - pos >= 4:
            (body_len,) = _LEN.unpack_from(data, pos)
            if body_len > _MAX_BODY or len(data) - pos < body_len + 8:
                break
            body = data[pos + 4 : pos + 4 + body_len]
            (want,) = _LEN.unpack_from(data, pos + 4 + body_len)
            if crc32c(body) != want:
                break
            rec_offset = _BODY_HEAD.unpack_from(body, 0)[0]
            if rec_offset != offset:
                break
            positions.append(pos)
            offset += 1
            pos += body_len + 8
            valid = pos
        return positions, valid, offset

    # -- appends -----------------------------------------------------------

    def _roll(self, base_offset: int) -> None:
        path = os.path.join(self.dir, f"{base_offset:020d}.seg")
        open(path, "ab").close()
        self._segments.append((base_offset, path, []))

    def append(self, key: bytes, frame_bytes: bytes, enqueued_us: int) -> int:
        with self._lock:
            positions = self._segments[-1][2]
            if positions and self._append_size >= self.segment_bytes:
                os.fsync(self._append_f.fileno())
                self._append_f.close()
                self._roll(self.head)
                self._append_f = open(self._segments[-1][1], "ab", buffering=0)
                self._append_size = 0
                positions = self._segments[-1][2]
            offset = self.head
            body = _BODY_HEAD.pack(offset, enqueued_us, key) + frame_bytes
            raw = _LEN.pack(len(body)) + body + _LEN.pack(crc32c(body))
            pos = self._append_size
            self._append_f.write(raw)
            positions.append(pos)
            self._append_size = pos + len(raw)
            self.head = offset + 1
            self.bytes_total += len(raw)
            self._dirty_bytes += len(raw)
            if self._dirty_bytes >= _FSYNC_BYTES:
                os.fsync(self._append_f.fileno())
                self._dirty_bytes = 0
            return offset

    def fsync(self) -> None:
        with self._lock:
            if self._dirty_bytes:
                os.fsync(self._append_f.fileno())
                self._dirty_bytes = 0

    # -- reads ---------------------------------------------------------

    def read(self, from_offset: int, max_records: int) -> list[QueueRecord]:
        out: list[QueueRecord] = []
        offset = from_offset
        while len(out) < max_records:
            with self._lock:
                if offset >= self.head:
                    break
                seg = self._segment_for(offset)
                if seg is None:
                    break
                base, path, positions = seg
                pos = positions[offset - base]
            rec = self._read_one(path, pos, offset)
            out.append(rec)
            offset += 1
        return out

    def _segment_for(self, offset: int):
        lo, hi = 0, len(self._segments) - 1
        while lo <= hi:
            mid = (lo + hi) // 2
            base, _, positions = self._segments[mid]
            if offset < base:
                hi = mid - 1
            elif offset >= base + len(positions):
                lo = mid + 1
            else:
                return self._segments[mid]
        return None

    def _read_one(self, path: str, pos: int, offset: int) -> QueueRecord:
        f = self._read_fds.get(path)
        if f is None:
            f = open(path, "rb")
            self._read_fds[path] = f
        raw_len = os.pread(f.fileno(), 4, pos)
        (body_len,) = _LEN.unpack(raw_len)
        body = os.pread(f.fileno(), body_len, pos + 4)
        rec_offset, enqueued_us, key = _BODY_HEAD.unpack_from(body, 0)
        assert rec_offset == offset
        return QueueRecord(self.partition, offset, key, enqueued_us, body[_BODY_HEAD.size:])

    def close(self) -> None:
        with self._lock:
            try:
                os.fsync(self._append_f.fileno())
            except (OSError, ValueError):
                pass
            self._append_f.close()
            for f in self._read_fds.values():
                f.close()
            self._read_fds.clear()


class Broker:
    """Single-node durable queue with a fixed partition count."""

    def __init__(
        self,
        data_dir: str,
        partitions: int = 8,
        segment_bytes: int = 128 * 1024 * 1024,
        disk_budget_bytes: int = 4 * 1024 * 1024 * 1024,
        fsync_interval_ms: int = 50,
    ):
        self.data_dir = data_dir
        root = os.path.join(data_dir, "queue")
        self.partition_count = partitions
        self.disk_budget_bytes = disk_budget_bytes
        self._logs = [PartitionLog(root, p, segment_bytes) for p in range(partitions)]
        self._cursor_dir = os.path.join(root, "cursors")
        os.makedirs(self._cursor_dir, exist_ok=True)
        self._cursors: dict[str, dict[int, int]] = {}
        self._cursor_lock = threading.Lock()
        self._load_cursors()
        self._shutdown = False
        self.data_available = threading.Condition()
        self._stop_flusher = threading.Event()
        self._flusher = threading.Thread(
            target=self._flush_loop, args=(fsync_interval_ms / 1000.0,),
            name="broker-fsync", daemon=True,
        )
        self._flusher.start()

    # -- partitioning ----------------------------------------------------

    def partition_for_key(self, key: bytes) -> int:
        return crc32c(key) % self.partition_count

    # -- producer API ----------------------------------------------------

    def publish(self, key: bytes, frame_bytes: bytes, validate: bool = True) -> tuple[int, int]:
        if self._shutdown:
            raise Shutdown("broker is shutting down")
        if len(key) != 16:
            raise BrokerError("key must be 16 bytes")
        if validate:
            wire.decode_frame(frame_bytes)  # raises on anything malformed
        if self.bytes_total() > self.disk_budget_bytes:
            raise QueueFull(
                f"queue holds more than the configured {self.disk_budget_bytes} bytes"
            )
        partition = self.partition_for_key(key)
        offset = self._logs[partition].append(key, frame_bytes, time.time_ns() // 1000)
        with self.data_available:
            self.data_available.notify_all()
        return partition, offset

    # -- consumer API ------------------------------------------------------

    def _log(self, partition: int) -> PartitionLog:
        if not 0 <= partition < self.partition_count:
            raise UnknownPartition(f"partition {partition} does not exist")
        return self._logs[partition]

    def fetch(self, group: str, partition: int, from_offset: int, max_records: int):
        return self._log(partition).read(from_offset, max_records)

    def commit(self, group: str, partition: int, offset: int) -> None:
        plog = self._log(partition)
        if offset > plog.head:
            raise OffsetBeyondHead(f"offset {offset} beyond head {plog.head}")
        with self._cursor_lock:
            cur = self._cursors.setdefault(group, {})
            cur[partition] = offset
            self._persist_cursors(group)

    def committed(self, group: str, partition: int) -> int:
        self._log(partition)
        with self._cursor_lock:
            return self._cursors.get(group, {}).get(partition, 0)

    def head(self, partition: int) -> int:
        return self._log(partition).head

    def wait_for_data(self, group: str, timeout: float) -> None:
        """Block until any partition may have records past the group's
        commits (or the timeout elapses)."""
        with self.data_available:
            self.data_available.wait(timeout)

    def stats(self) -> dict:
        with self._cursor_lock:
            cursors = {g: dict(c) for g, c in self._cursors.items()}
        return {
            "partitions": self.partition_count,
            "heads": [plog.head for plog in self._logs],
            "bytes_total": self.bytes_total(),
            "cursors": cursors,
        }

    def bytes_total(self) -> int:
        return sum(plog.bytes_total for plog in self._logs)

    # -- cursor persistence ----------------------------------------------

    def _cursor_path(self, group: str) -> str:
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in group)
        return os.path.join(self._cursor_dir, f"{safe}.json")

    def _persist_cursors(self, group: str) -> None:
        path = self._cursor_path(group)
        tmp = path + ".tmp"
        doc = {str(p): o for p, o in self._cursors[group].items()}
        with open(tmp, "w") as f:
            json.dump(doc, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def _load_cursors(self) -> None:
        for name in os.listdir(self._cursor_dir):
            if not name.endswith(".json"):
                continue
            group = name[: -len(".json")]
            try:
                with open(os.path.join(self._cursor_dir, name)) as f:
                    doc = json.load(f)
                self._cursors[group] = {int(p): int(o) for p, o in doc.items()}
            except (ValueError, OSError) as exc:
                log.warning("ignoring unreadable cursor file %s: %s", name, exc)
        # a cursor must never sit beyond a (possibly truncated) head
        for group, cur in self._cursors.items():
            for p, o in list(cur.items()):
                if p < self.partition_count and o > self._logs[p].head:
                    cur[p] = self._logs[p].head

    # -- lifecycle -------------------------------------------------------

    def _flush_loop(self, interval_s: float) -> None:
        while not self._stop_flusher.wait(interval_s):
            for plog in self._logs:
                try:
                    plog.fsync()
                except (OSError, ValueError) as exc:
                    log.error("fsync failed on partition %d: %s", plog.partition, exc)

    def begin_shutdown(self) -> None:
        self._shutdown = True

    def close(self) -> None:
        self._shutdown = True
        self._stop_flusher.set()
        self._flusher.join(timeout=2)
        for plog in self._logs:
            plog.close()


# --- key extraction for the ingest listener --------------------------------

def record_key(frame: Frame) -> bytes:
    """Partition key: stream id for chunks, entity id for entity frames."""
    if frame.frame_type == FT_CHUNK:
        if len(frame.payload) < 16:
            raise wire.MalformedChunk("chunk payload shorter than a stream id")
        return frame.payload[:16]
    if frame.frame_type == FT_ENTITY:
        try:
            doc = json.loads(frame.payload.decode("utf-8"))
            return bytes.fromhex(doc["id"])
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise BrokerError(f"entity frame without a parseable id: {exc}") from exc
    raise BrokerError("control frames are not publishable records")


class _ServerBase:
    def __init__(self, listen: str, name: str):
        host, port = parse_addr(listen)
        self._sock = socket.create_server((host, port), backlog=512)
        self.addr = f"{host}:{self._sock.getsockname()[1]}"
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{name}-accept", daemon=True
        )
        self.name = name
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        try:
            self._sock.settimeout(0.25)
        except OSError:  # closed before the thread got scheduled
            return
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(
                target=self._safe_serve, args=(FrameSocket(conn), peer),
                name=f"{self.name}-{peer[1]}", daemon=True,
            ).start()

    def _safe_serve(self, fs: FrameSocket, peer) -> None:
        try:
            self._serve(fs, peer)
        except (TransportError, wire.WireError, OSError) as exc:
            log.debug("%s connection %s closed: %s", self.name, peer, exc)
        finally:
            fs.close()

    def _serve(self, fs: FrameSocket, peer) -> None:  # pragma: no cover
        raise NotImplementedError

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        self._accept_thread.join(timeout=2)


class IngestServer(_ServerBase):
    """Producer-facing listener: entity/chunk frames in, acks out.

    One control ack per received frame, in order, sent after the record
    is durably appended; producers may pipeline.
    """

    def __init__(self, broker: Broker, listen: str):
        self.broker = broker
        super().__init__(listen, "ingest")

    def _serve(self, fs: FrameSocket, peer) -> None:
        while not self._stop.is_set():
            frame = fs.recv_frame(timeout=None)
            if frame is None:
                return
            if frame.frame_type == FT_CONTROL:
                doc = parse_control(frame)
                if doc.get("op") == "ping":
                    fs.send_control({"op": "pong"})
                    continue
                fs.send_control({"op": "error", "code": "bad_request",
                                 "message": f"unsupported op {doc.get('op')!r}"})
                continue
            try:
                key = record_key(frame)
                partition, offset = self.broker.publish(
                    key, wire.frame_bytes(frame), validate=False
                )
            except QueueFull:
                fs.send_control({"op": "error", "code": "queue_full",
                                 "message": "ingest backlog over disk budget; retry"})
                continue
            except Shutdown:
                fs.send_control({"op": "error", "code": "shutdown",
                                 "message": "broker is shutting down"})
                return
            except (BrokerError, wire.WireError) as exc:
                fs.send_control({"op": "error", "code": "bad_frame", "message": str(exc)})
                continue
            ack = {"op": "ack", "partition": partition, "offset": offset}
            if frame.frame_type == FT_CHUNK:
                chunk = wire.unpack_chunk(frame.payload)
                ack.update(stream=chunk.stream_id.hex(), seq=chunk.sequence)
            else:
                ack["id"] = key.hex()
            fs.send_control(ack)


class AdminServer(_ServerBase):
    """Consumer API over TCP for out-of-process workers and the bench
    harness: fetch / commit / committed / head / stats."""

    def __init__(self, broker: Broker, listen: str):
        self.broker = broker
        super().__init__(listen, "admin")

    def _serve(self, fs: FrameSocket, peer) -> None:
        while not self._stop.is_set():
            doc = fs.recv_control(timeout=None)
            if doc is None:
                return
            try:
                fs.send_control(self._dispatch(doc))
            except (BrokerError, KeyError, ValueError) as exc:
                fs.send_control({"op": "error", "code": type(exc).__name__,
                                 "message": str(exc)})

    def _dispatch(self, doc: dict) -> dict:
        op = doc.get("op")
        if op == "fetch":
            records = self.broker.fetch(
                doc["group"], int(doc["partition"]), int(doc["from"]), int(doc["max"])
            )
            return {
                "op": "records",
                "records": [
                    {
                        "offset": r.offset,
                        "enqueued_us": r.enqueued_at,
                        "key": r.key.hex(),
                        "frame": r.frame_bytes.hex(),
                    }
                    for r in records
                ],
            }
        if op == "commit":
            self.broker.commit(doc["group"], int(doc["partition"]), int(doc["offset"]))
            return {"op": "ok"}
        if op == "committed":
            return {"op": "offset",
                    "offset": self.broker.committed(doc["group"], int(doc["partition"]))}
        if op == "head":
            return {"op": "offset", "offset": self.broker.head(int(doc["partition"]))}
        if op == "stats":
            return {"op": "stats", **self.broker.stats()}
        raise BrokerError(f"unsupported admin op {op!r}")
