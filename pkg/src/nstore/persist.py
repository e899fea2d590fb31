"""Persist workers: queue records in, metadata rows and signal logs out.

Entity frames land in the metadata store (idempotent by id); chunk
frames are appended to per-stream ``.nsl`` logs in sequence order. The
``.nsl`` file is a concatenation of chunk payloads, each keeping its
40-byte chunk header, which is what makes torn tails recoverable and
replays detectable: a chunk whose sequence is behind the log is simply
a duplicate.

A record that can never be applied (undecodable payload, shape
mismatch, beyond-window gap) is quarantined into
``<data_dir>/quarantine/`` and the pipeline keeps going.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from nstore import wire
from nstore.broker import QueueRecord
from nstore.store import CycleViolation, IntegrityViolation, StoreClosed
from nstore.transport import ConnectionClosed, TransportError
from nstore.wire import CHUNK_HEADER_LEN, FT_CHUNK, FT_CONTROL, FT_ENTITY, StreamChunk

from nstore.model import BadDocument, TopicKind, decode_entity

log = logging.getLogger("nstore.persist")

DEFAULT_REORDER_WINDOW = 64
DEFAULT_SAMPLING_RATE = 1000.0


class PersistError(Exception):
    pass


class MalformedPayload(PersistError):
    pass


class ChannelMismatch(PersistError):
    pass


class SequenceGap(PersistError):
    """Chunk arrived beyond the reorder window; quarantined."""


class StoreUnavailable(PersistError):
    """Metadata store unreachable; retry, do not skip."""


class NoPartitionsAvailable(PersistError):
    pass


class OutcomeKind(Enum):
    METADATA_INSERTED = "metadata_inserted"
    SAMPLES_APPENDED = "samples_appended"
    DUPLICATE = "duplicate"
    BUFFERED = "buffered"
    STREAM_FINALIZED = "stream_finalized"


@dataclass(frozen=True)
class PersistOutcome:
    kind: OutcomeKind
    entity_id: bytes | None = None
    stream_id: bytes | None = None
    count: int = 0


class SignalLog:
    """Append-only sample log for one stream.

    On open the tail is scanned; anything that is not a complete,
    sequence-contiguous chunk is truncated away, so the file is always
    a valid concatenation afterwards.
    """

    def __init__(self, streams_dir: str, stream_id: bytes,
                 sampling_rate_hz: float | None = None):
        self.stream_id = stream_id
        os.makedirs(streams_dir, exist_ok=True)
        self.path = os.path.join(streams_dir, f"{stream_id.hex()}.nsl")
        self.meta_path = os.path.join(streams_dir, f"{stream_id.hex()}.meta.json")
        self.channel_count: int | None = None
        self.sampling_rate_hz = sampling_rate_hz
        self.finalized = False
        self.next_expected_sequence = 0
        self.next_sample = 0
        self.bytes_written = 0
        self._load_meta()
        self._recover_tail()
        self._f = open(self.path, "ab", buffering=0)

    def _load_meta(self) -> None:
        if not os.path.exists(self.meta_path):
            return
        try:
            with open(self.meta_path) as f:
                doc = json.load(f)
            self.channel_count = doc.get("channel_count")
            if doc.get("sampling_rate_hz") is not None:
                self.sampling_rate_hz = float(doc["sampling_rate_hz"])
            self.finalized = bool(doc.get("finalized", False))
        except (ValueError, OSError) as exc:
            log.warning("unreadable sidecar %s: %s", self.meta_path, exc)

    def _save_meta(self) -> None:
        doc = {
            "channel_count": self.channel_count,
            "sampling_rate_hz": self.sampling_rate_hz,
            "finalized": self.finalized,
        }
        tmp = self.meta_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(doc, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.meta_path)

    def _recover_tail(self) -> None:
        if not os.path.exists(self.path):
            open(self.path, "ab").close()
            return
        size = os.path.getsize(self.path)
        valid = 0
        seq = 0
        samples = 0
        with open(self.path, "rb") as f:
            while True:
                head = f.read(CHUNK_HEADER_LEN)
                if len(head) < CHUNK_HEADER_LEN:
                    break
                stream_id = head[:16]
                sequence, start_sample = struct.unpack_from("<QQ", head, 16)
                channels, spc = struct.unpack_from("<HI", head, 32)
                body = channels * spc * wire.SAMPLE_BYTES
                if (
                    stream_id != self.stream_id
                    or sequence != seq
                    or start_sample != samples
                    or channels < 1
                    or (self.channel_count is not None and channels != self.channel_count)
                    or f.tell() + body > size
                ):
                    break
                f.seek(body, os.SEEK_CUR)
                if self.channel_count is None:
                    self.channel_count = channels
                seq += 1
                samples += spc
                valid = f.tell()
        if valid < size:
            log.warning(
                "stream %s: truncating %d torn bytes", self.stream_id.hex(), size - valid
            )
            with open(self.path, "r+b") as f:
                f.truncate(valid)
        self.next_expected_sequence = seq
        self.next_sample = samples
        self.bytes_written = valid

    def append(self, chunk: StreamChunk, payload: bytes | None = None) -> int:
        """Append one in-order chunk; returns the frame count added."""
        if chunk.sequence != self.next_expected_sequence:
            raise PersistError(
                f"append out of order: chunk {chunk.sequence}, "
                f"expected {self.next_expected_sequence}"
            )
        if self.channel_count is None:
            self.channel_count = chunk.channel_count
            self._save_meta()
        elif chunk.channel_count != self.channel_count:
            raise ChannelMismatch(
                f"stream {self.stream_id.hex()} has {self.channel_count} channels, "
                f"chunk carries {chunk.channel_count}"
            )
        if chunk.samples_per_channel == 0:
            return 0
        raw = payload if payload is not None else wire.pack_chunk(chunk)
        self._f.write(raw)
        self.bytes_written += len(raw)
        self.next_expected_sequence += 1
        self.next_sample += chunk.samples_per_channel
        return chunk.samples_per_channel

    def finalize(self) -> None:
        if not self.finalized:
            os.fsync(self._f.fileno())
            self.finalized = True
            self._save_meta()

    def fsync(self) -> None:
        os.fsync(self._f.fileno())

    def close(self) -> None:
        try:
            self._f.close()
        except OSError:  # pragma: no cover
            pass

    # -- readers ---------------------------------------------------------

    def iter_payloads(self):
        """Yield each chunk's raw sample bytes straight off disk."""
        with open(self.path, "rb") as f:
            while True:
                head = f.read(CHUNK_HEADER_LEN)
                if len(head) < CHUNK_HEADER_LEN:
                    return
                channels, spc = struct.unpack_from("<HI", head, 32)
                yield f.read(channels * spc * wire.SAMPLE_BYTES)

    def read_matrix(self) -> np.ndarray:
        """Whole stream as a (frames, channels) float64 matrix."""
        parts = [np.frombuffer(p, dtype="<f8") for p in self.iter_payloads()]
        channels = self.channel_count or 1
        if not parts:
            return np.empty((0, channels))
        flat = np.concatenate(parts)
        return flat.reshape(-1, channels)

    def sample_sha256(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for payload in self.iter_payloads():
            h.update(payload)
        return h.hexdigest()


def read_nsl_sha256(path: str) -> tuple[str, int, int]:
    """Read-only audit of a stream log: (sample sha256, frames, channels).

    Safe to call on a live node's file; ignores a torn tail the same
    way recovery would.
    """
    import hashlib

    h = hashlib.sha256()
    frames = 0
    channels = 0
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        while True:
            head = f.read(CHUNK_HEADER_LEN)
            if len(head) < CHUNK_HEADER_LEN:
                break
            ch, spc = struct.unpack_from("<HI", head, 32)
            body = ch * spc * wire.SAMPLE_BYTES
            if f.tell() + body > size:
                break
            h.update(f.read(body))
            frames += spc
            channels = ch
    return h.hexdigest(), frames, channels


@dataclass
class _BufferedChunk:
    chunk: StreamChunk
    payload: bytes
    end_of_stream: bool


@dataclass
class _StreamState:
    log: SignalLog
    buffer: dict[int, _BufferedChunk] = field(default_factory=dict)


class PersistEngine:
    """Applies queue records; one instance per node, shared by workers.

    Streams are pinned to partitions by key, so two workers never touch
    the same stream; the internal lock only guards the stream map.
    """

    def __init__(self, store, data_dir: str, reorder_window: int = DEFAULT_REORDER_WINDOW,
                 default_sampling_rate: float | None = None):
        self.store = store
        self.data_dir = data_dir
        self.reorder_window = reorder_window
        self.default_sampling_rate = default_sampling_rate
        self.streams_dir = os.path.join(data_dir, "streams")
        self.quarantine_dir = os.path.join(data_dir, "quarantine")
        os.makedirs(self.streams_dir, exist_ok=True)
        os.makedirs(self.quarantine_dir, exist_ok=True)
        self._streams: dict[bytes, _StreamState] = {}
        self._lock = threading.Lock()
        self.recover()

    def recover(self) -> None:
        """Open (and tail-truncate) every stream log under the data dir."""
        for name in sorted(os.listdir(self.streams_dir)):
            if not name.endswith(".nsl"):
                continue
            stream_id = bytes.fromhex(name[: -len(".nsl")])
            self._get_stream(stream_id)

    def _get_stream(self, stream_id: bytes) -> _StreamState:
        with self._lock:
            state = self._streams.get(stream_id)
            if state is None:
                rate = self._sampling_rate_for(stream_id)
                state = _StreamState(SignalLog(self.streams_dir, stream_id, rate))
                self._streams[stream_id] = state
            return state

    def _sampling_rate_for(self, stream_id: bytes) -> float | None:
        entity = None
        try:
            entity = self.store.get_entity(stream_id)
        except Exception:  # remote store may be down; sidecar still works
            pass
        if entity is not None and entity.topic is TopicKind.DATA:
            block = entity.attribute("EEG")
            if block is not None:
                rate = block.fields.get("sampling_rate")
                if isinstance(rate, (int, float)) and not isinstance(rate, bool) and rate > 0:
                    return float(rate)
        return self.default_sampling_rate

    def stream(self, stream_id: bytes) -> SignalLog | None:
        with self._lock:
            state = self._streams.get(stream_id)
            return state.log if state else None

    def stream_ids(self) -> list[bytes]:
        with self._lock:
            return list(self._streams)

    def buffered_count(self) -> int:
        with self._lock:
            return sum(len(s.buffer) for s in self._streams.values())

    # -- record handling ---------------------------------------------------

    def handle_record(self, record: QueueRecord) -> PersistOutcome:
        """Apply one record.

        Unresolvable records are quarantined here and raise
        MalformedPayload/ChannelMismatch/SequenceGap; the caller decides
        retry policy only for IntegrityViolation and StoreUnavailable.
        """
        try:
            frame, _ = wire.decode_frame(record.frame_bytes)
        except wire.WireError as exc:
            self.quarantine(record, f"frame: {exc}")
            raise MalformedPayload(str(exc)) from exc
        if frame.frame_type == FT_ENTITY:
            return self._handle_entity(record, frame.payload)
        if frame.frame_type == FT_CHUNK:
            return self._handle_chunk(record, frame)
        self.quarantine(record, "control frame in the record stream")
        raise MalformedPayload("control frames are not persistable")

    def _handle_entity(self, record: QueueRecord, payload: bytes) -> PersistOutcome:
        try:
            entity, relations = decode_entity(payload)
        except BadDocument as exc:
            self.quarantine(record, f"entity: {exc}")
            raise MalformedPayload(str(exc)) from exc
        try:
            inserted = self.store.insert_entity(entity, relations)
        except (StoreClosed, TransportError, ConnectionClosed) as exc:
            raise StoreUnavailable(str(exc)) from exc
        if inserted:
            return PersistOutcome(OutcomeKind.METADATA_INSERTED, entity_id=entity.id)
        return PersistOutcome(OutcomeKind.DUPLICATE, entity_id=entity.id)

    def _handle_chunk(self, record: QueueRecord, frame: wire.Frame) -> PersistOutcome:
        try:
            chunk = wire.unpack_chunk(frame.payload)
        except wire.MalformedChunk as exc:
            self.quarantine(record, f"chunk: {exc}")
            raise MalformedPayload(str(exc)) from exc
        state = self._get_stream(chunk.stream_id)
        slog = state.log
        seq = chunk.sequence

        if seq < slog.next_expected_sequence:
            return PersistOutcome(OutcomeKind.DUPLICATE, stream_id=chunk.stream_id)
        if slog.finalized:
            if chunk.samples_per_channel == 0:
                return PersistOutcome(OutcomeKind.DUPLICATE, stream_id=chunk.stream_id)
            self.quarantine(record, "data chunk after end of stream")
            raise MalformedPayload("stream already finalized")
        if seq > slog.next_expected_sequence:
            if seq - slog.next_expected_sequence > self.reorder_window or (
                len(state.buffer) >= self.reorder_window
            ):
                self.quarantine(
                    record,
                    f"sequence {seq} beyond reorder window "
                    f"(next expected {slog.next_expected_sequence})",
                )
                raise SequenceGap(
                    f"stream {chunk.stream_id.hex()}: chunk {seq} outside the "
                    f"{self.reorder_window}-chunk window"
                )
            state.buffer[seq] = _BufferedChunk(chunk, frame.payload, frame.end_of_stream)
            return PersistOutcome(OutcomeKind.BUFFERED, stream_id=chunk.stream_id)

        # in order: append, then drain anything the buffer now unblocks
        appended = self._append_checked(record, state, chunk, frame.payload)
        finalize = frame.end_of_stream
        while not finalize and slog.next_expected_sequence in state.buffer:
            buffered = state.buffer.pop(slog.next_expected_sequence)
            appended += self._append_checked(record, state, buffered.chunk, buffered.payload)
            finalize = buffered.end_of_stream
        if finalize:
            slog.finalize()
            return PersistOutcome(
                OutcomeKind.STREAM_FINALIZED, stream_id=chunk.stream_id, count=appended
            )
        return PersistOutcome(
            OutcomeKind.SAMPLES_APPENDED, stream_id=chunk.stream_id, count=appended
        )

    def _append_checked(self, record: QueueRecord, state: _StreamState,
                        chunk: StreamChunk, payload: bytes) -> int:
        try:
            appended = state.log.append(chunk, payload)
        except ChannelMismatch as exc:
            self.quarantine(record, str(exc))
            raise
        if chunk.samples_per_channel and chunk.start_sample != state.log.next_sample - chunk.samples_per_channel:
            # inconsistent numbering from the sender; the log wins
            log.warning(
                "stream %s: chunk %d claims start_sample %d, log says %d",
                chunk.stream_id.hex(), chunk.sequence, chunk.start_sample,
                state.log.next_sample - chunk.samples_per_channel,
            )
        return appended

    def quarantine(self, record: QueueRecord, reason: str) -> str:
        path = os.path.join(
            self.quarantine_dir, f"p{record.partition:02d}-o{record.offset:020d}.bin"
        )
        with open(path, "wb") as f:
            f.write(record.frame_bytes)
        log.error(
            "quarantined record p%d/o%d: %s", record.partition, record.offset, reason
        )
        return path

    def flush(self) -> None:
        with self._lock:
            states = list(self._streams.values())
        for state in states:
            state.log.fsync()

    def close(self) -> None:
        with self._lock:
            states = list(self._streams.values())
            self._streams.clear()
        for state in states:
            state.log.close()


class _WorkerAbort(Exception):
    pass


@dataclass
class _PartitionCursor:
    """Per-partition consumer state with dependency stalls.

    Entity batches can reference counterparts that arrive later (other
    partitions, or later offsets of this one), so a record failing its
    integrity check is parked and retried while later records keep
    flowing. The commit never moves past the oldest parked record;
    after a crash the replay hits the engine's dedup and applied-ahead
    records collapse to Duplicates.
    """

    next_fetch: int
    stalled: dict[int, tuple[QueueRecord, float]] = field(default_factory=dict)

    def floor(self) -> int:
        return min(self.stalled) if self.stalled else self.next_fetch


class WorkerPool:
    """Partition-parallel consumers: fetch -> handle -> commit."""

    GROUP = "persist"
    MAX_STALLED = 512

    def __init__(self, engine: PersistEngine, broker, count: int,
                 batch_size: int = 64, integrity_retry_s: float = 15.0):
        partitions = list(range(broker.partition_count))
        if count < 1 or count > len(partitions):
            raise NoPartitionsAvailable(
                f"{count} workers over {len(partitions)} partitions"
            )
        self.engine = engine
        self.broker = broker
        self.batch_size = batch_size
        self.integrity_retry_s = integrity_retry_s
        self._stop = threading.Event()
        self._stall_counts: dict[int, int] = {}
        self._threads = []
        for i in range(count):
            owned = partitions[i::count]
            t = threading.Thread(
                target=self._run, args=(owned,), name=f"persist-{i}", daemon=True
            )
            self._threads.append(t)
            t.start()

    def _run(self, owned: list[int]) -> None:
        cursors = {
            p: _PartitionCursor(self.broker.committed(self.GROUP, p)) for p in owned
        }
        committed = {p: cursors[p].next_fetch for p in owned}
        while not self._stop.is_set():
            progressed = False
            for p in owned:
                cursor = cursors[p]
                try:
                    progressed |= self._retry_stalled(cursor)
                    progressed |= self._pump(p, cursor)
                except (TransportError, ConnectionClosed) as exc:
                    log.warning("broker i/o failed on partition %d: %s", p, exc)
                    time.sleep(0.2)
                    continue
                except _WorkerAbort:
                    return
                floor = cursor.floor()
                if floor > committed[p]:
                    try:
                        self.broker.commit(self.GROUP, p, floor)
                        committed[p] = floor
                    except (TransportError, ConnectionClosed) as exc:
                        log.warning("commit failed on partition %d: %s", p, exc)
                self._stall_counts[p] = len(cursor.stalled)
            if not progressed:
                self.broker.wait_for_data(self.GROUP, 0.02)

    def _pump(self, partition: int, cursor: _PartitionCursor) -> bool:
        records = self.broker.fetch(
            self.GROUP, partition, cursor.next_fetch, self.batch_size
        )
        for rec in records:
            self._apply(rec, cursor)
            cursor.next_fetch = rec.offset + 1
        return bool(records)

    def _retry_stalled(self, cursor: _PartitionCursor) -> bool:
        if not cursor.stalled:
            return False
        progressed = False
        now = time.monotonic()
        for offset in sorted(cursor.stalled):
            rec, deadline = cursor.stalled[offset]
            try:
                self.engine.handle_record(rec)
            except IntegrityViolation as exc:
                if now >= deadline:
                    self.engine.quarantine(rec, f"integrity: {exc}")
                    del cursor.stalled[offset]
                    progressed = True
                continue
            except CycleViolation as exc:
                self.engine.quarantine(rec, f"cycle: {exc}")
            except (MalformedPayload, ChannelMismatch, SequenceGap):
                pass  # quarantined by the engine
            except StoreUnavailable:
                return progressed  # retry the whole set later
            del cursor.stalled[offset]
            progressed = True
        return progressed

    def _apply(self, rec: QueueRecord, cursor: _PartitionCursor) -> None:
        backoff = 0.05
        while True:
            try:
                self.engine.handle_record(rec)
                return
            except StoreUnavailable as exc:
                if self._stop.is_set():
                    raise _WorkerAbort from exc
                log.warning("store unavailable (%s); retrying p%d/o%d",
                            exc, rec.partition, rec.offset)
                time.sleep(backoff)
                backoff = min(backoff * 2, 0.5)
            except IntegrityViolation as exc:
                if len(cursor.stalled) >= self.MAX_STALLED:
                    self.engine.quarantine(rec, f"integrity (stall overflow): {exc}")
                    return
                cursor.stalled[rec.offset] = (
                    rec, time.monotonic() + self.integrity_retry_s
                )
                return
            except CycleViolation as exc:
                self.engine.quarantine(rec, f"cycle: {exc}")
                return
            except (MalformedPayload, ChannelMismatch, SequenceGap):
                return  # already quarantined by the engine

    def lag(self) -> int:
        total = 0
        for p in range(self.broker.partition_count):
            total += self.broker.head(p) - self.broker.committed(self.GROUP, p)
        return total

    def drain(self, timeout_s: float = 60.0) -> bool:
        """Wait until every published record is applied and committed."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.lag() == 0 and self.engine.buffered_count() == 0:
                return True
            time.sleep(0.02)
        return False

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=10)
