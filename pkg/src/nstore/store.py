"""Embedded metadata store: five topic tables, attributes, relations.

Mutations flow through a single writer path that appends a WAL entry
before touching the in-memory indexes (hash on id, per-topic list
ordered by (created_at, id), relation adjacency). Readers take a shared
lock and see only committed state, so every read is consistent as of
one LSN. The WAL doubles as the replication feed: a replica applying
the same entries in LSN order answers reads byte-identically.

Durability stance: entries reach the OS before a mutation returns
(process-crash safe); fsync happens on snapshots and shutdown.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import threading
from bisect import insort
from contextlib import contextmanager

from nstore import predicate as pred_mod
from nstore import wal
from nstore.model import (
    RELATION_ENDPOINTS,
    BadDocument,
    Relation,
    RelationKind,
    TopicEntity,
    TopicKind,
    dumps_canonical,
    entity_doc,
    entity_from_doc,
    format_timestamp,
    parse_timestamp,
    validate_relation,
)
from nstore.wire import crc32c

MAX_PAGE_SIZE = 1000
_SNAPSHOT_RE = re.compile(r"snapshot-(\d+)\Z")


class StoreError(Exception):
    pass


class IntegrityViolation(StoreError):
    pass


class CycleViolation(StoreError):
    pass


class StoreClosed(StoreError):
    pass


class PageSizeOutOfRange(StoreError):
    pass


class RelationTopicMismatch(StoreError):
    pass


def relation_id(kind: RelationKind, from_id: bytes, to_id: bytes) -> bytes:
    """Deterministic relation id; (kind, from, to) is the identity."""
    h = hashlib.blake2b(digest_size=16)
    h.update(kind.value.encode())
    h.update(from_id)
    h.update(to_id)
    return h.digest()


class RWLock:
    """Write-preferring readers/writer lock. Not reentrant."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def _order_key(entity: TopicEntity) -> tuple[int, bytes]:
    return (entity.created_at, entity.id)


class MetaStore:
    """One store instance; primary or replica depending on how it is fed.

    ``meta_dir=None`` keeps everything in memory (used for scratch
    stores and oracles).
    """

    def __init__(self, meta_dir: str | None, snapshot_every_n_entries: int = 10_000):
        self.meta_dir = meta_dir
        self.snapshot_every = max(1, snapshot_every_n_entries)
        self._lock = RWLock()
        self._closed = False
        self._entities: dict[bytes, TopicEntity] = {}
        self._order: dict[TopicKind, list[TopicEntity]] = {t: [] for t in TopicKind}
        self._relations: dict[tuple[RelationKind, bytes, bytes], Relation] = {}
        self._rel_from: dict[tuple[RelationKind, bytes], list[bytes]] = {}
        self._rel_to: dict[tuple[RelationKind, bytes], list[bytes]] = {}
        self._wal_raws: list[bytes] = []  # raw framed entries, index = lsn-1
        self.committed_lsn = 0
        self._writer: wal.WalWriter | None = None
        self.commit_cond = threading.Condition()  # replication tailing
        if meta_dir is not None:
            os.makedirs(meta_dir, exist_ok=True)
            self._recover()
            self._writer = wal.WalWriter(self.wal_path)

    # --- paths ------------------------------------------------------------

    @property
    def wal_path(self) -> str:
        assert self.meta_dir is not None
        return os.path.join(self.meta_dir, "wal.log")

    def _snapshot_path(self, lsn: int) -> str:
        assert self.meta_dir is not None
        return os.path.join(self.meta_dir, f"snapshot-{lsn}")

    # --- recovery ---------------------------------------------------------

    def _recover(self) -> None:
        snap_lsn = self._load_latest_snapshot()
        entries, valid, raws = wal.scan(self.wal_path)
        wal.truncate_to(self.wal_path, valid)
        self._wal_raws = raws
        for entry in entries:
            if entry.lsn <= snap_lsn:
                continue
            self._apply_entry(entry)
            self.committed_lsn = entry.lsn
        if snap_lsn > self.committed_lsn:
            # snapshot ahead of a truncated wal tail cannot happen in a
            # healthy store; trust the wal and rebuild without snapshot
            raise StoreError(
                f"snapshot at lsn {snap_lsn} is ahead of wal ({self.committed_lsn})"
            )

    def _load_latest_snapshot(self) -> int:
        assert self.meta_dir is not None
        candidates = []
        for name in os.listdir(self.meta_dir):
            m = _SNAPSHOT_RE.match(name)
            if m:
                candidates.append(int(m.group(1)))
        for lsn in sorted(candidates, reverse=True):
            try:
                doc = _read_snapshot(self._snapshot_path(lsn))
            except StoreError:
                continue
            self._load_snapshot_doc(doc)
            self.committed_lsn = lsn
            return lsn
        return 0

    def _load_snapshot_doc(self, doc: dict) -> None:
        for raw in doc["entities"]:
            entity, _ = entity_from_doc(raw)
            self._index_entity(entity)
        for raw in doc["relations"]:
            kind = RelationKind(raw["kind"])
            from_id = bytes.fromhex(raw["from_id"])
            to_id = bytes.fromhex(raw["to_id"])
            rel = Relation(
                relation_id(kind, from_id, to_id),
                kind,
                from_id,
                to_id,
                parse_timestamp(raw["created_at"]),
            )
            self._index_relation(rel)

    # --- write path ---------------------------------------------------

    def insert_entity(self, entity: TopicEntity, relations: list[Relation] = ()) -> bool:
        """Atomically insert an entity with its attribute blocks and
        relation edges. Returns False (and changes nothing) when the id
        was already inserted, so replays are harmless."""
        with self._lock.write():
            if self._closed:
                raise StoreClosed("store is closed")
            if entity.id in self._entities:
                return False
            rels = self._validate_batch(entity, relations)
            payload = {
                "doc": entity_doc(entity, rels),
                "rel_created_at": [format_timestamp(r.created_at) for r in rels],
            }
            self._commit(wal.OP_INSERT_ENTITY, payload)
        with self.commit_cond:
            self.commit_cond.notify_all()
        return True

    def delete_entity(self, entity_id: bytes) -> None:
        """Deletion is restricted to entities with no relations."""
        with self._lock.write():
            if self._closed:
                raise StoreClosed("store is closed")
            entity = self._entities.get(entity_id)
            if entity is None:
                raise IntegrityViolation(f"no entity {entity_id.hex()}")
            if self._incident_relations(entity_id):
                raise IntegrityViolation("cannot delete an entity that has relations")
            self._commit(wal.OP_DELETE_ENTITY, {"id": entity_id.hex()})
        with self.commit_cond:
            self.commit_cond.notify_all()

    def _validate_batch(self, entity: TopicEntity, relations) -> list[Relation]:
        rels: list[Relation] = []
        seen: set[tuple[RelationKind, bytes, bytes]] = set()
        batch_parents: dict[bytes, bytes] = {}
        for rel in relations:
            key = (rel.kind, rel.from_id, rel.to_id)
            if key in seen or key in self._relations:
                raise IntegrityViolation(
                    f"relation {rel.kind.value} {rel.from_id.hex()}->{rel.to_id.hex()} already exists"
                )
            seen.add(key)
            from_e = entity if rel.from_id == entity.id else self._entities.get(rel.from_id)
            to_e = entity if rel.to_id == entity.id else self._entities.get(rel.to_id)
            if from_e is None or to_e is None:
                missing = rel.from_id if from_e is None else rel.to_id
                raise IntegrityViolation(f"relation references unknown entity {missing.hex()}")
            violation = validate_relation(rel.kind, from_e, to_e)
            if violation is not None:
                raise IntegrityViolation(f"{violation.code}: {violation.detail}")
            if rel.kind is RelationKind.PROCESS_PARENT:
                if rel.from_id in batch_parents or (
                    (RelationKind.PROCESS_PARENT, rel.from_id) in self._rel_from
                ):
                    raise IntegrityViolation(
                        f"process {rel.from_id.hex()} already has a parent"
                    )
                batch_parents[rel.from_id] = rel.to_id
            rels.append(
                Relation(relation_id(rel.kind, rel.from_id, rel.to_id),
                         rel.kind, rel.from_id, rel.to_id, rel.created_at)
            )
        if batch_parents:
            self._check_parent_cycles(batch_parents)
        return rels

    def _check_parent_cycles(self, batch_parents: dict[bytes, bytes]) -> None:
        def parent_of(pid: bytes) -> bytes | None:
            if pid in batch_parents:
                return batch_parents[pid]
            ups = self._rel_from.get((RelationKind.PROCESS_PARENT, pid))
            return ups[0] if ups else None

        for start in batch_parents:
            seen = {start}
            node = parent_of(start)
            while node is not None:
                if node in seen:
                    raise CycleViolation(
                        f"process parent chain through {start.hex()} forms a cycle"
                    )
                seen.add(node)
                node = parent_of(node)

    def _commit(self, op: str, payload: dict) -> None:
        entry = wal.WalEntry(self.committed_lsn + 1, op, payload)
        raw = wal.encode_entry(entry)
        if self._writer is not None:
            self._writer.append_raw(raw)
        self._wal_raws.append(raw)
        self._apply_entry(entry)
        self.committed_lsn = entry.lsn
        if self.meta_dir is not None and self.committed_lsn % self.snapshot_every == 0:
            self._write_snapshot()

    # --- apply (shared by writer, recovery, replication) ----------------

    def _apply_entry(self, entry: wal.WalEntry) -> None:
        if entry.op == wal.OP_INSERT_ENTITY:
            entity, rels = entity_from_doc(entry.payload["doc"])
            stamps = entry.payload.get("rel_created_at", [])
            for i, rel in enumerate(rels):
                created = parse_timestamp(stamps[i]) if i < len(stamps) else rel.created_at
                self._index_relation(
                    Relation(relation_id(rel.kind, rel.from_id, rel.to_id),
                             rel.kind, rel.from_id, rel.to_id, created)
                )
            self._index_entity(entity)
        elif entry.op == wal.OP_INSERT_RELATION:
            p = entry.payload
            kind = RelationKind(p["kind"])
            from_id = bytes.fromhex(p["from_id"])
            to_id = bytes.fromhex(p["to_id"])
            self._index_relation(
                Relation(relation_id(kind, from_id, to_id), kind, from_id, to_id,
                         parse_timestamp(p["created_at"]))
            )
        elif entry.op == wal.OP_INSERT_ATTRIBUTE:
            p = entry.payload
            entity_id = bytes.fromhex(p["entity_id"])
            old = self._entities[entity_id]
            patched, _ = entity_from_doc(
                {**entity_doc(old), "attributes": entity_doc(old)["attributes"] + [p["block"]]}
            )
            self._entities[entity_id] = patched
            row = self._order[old.topic]
            row[_index_in_order(row, old)] = patched
        elif entry.op == wal.OP_DELETE_ENTITY:
            entity_id = bytes.fromhex(entry.payload["id"])
            entity = self._entities.pop(entity_id)
            row = self._order[entity.topic]
            row.pop(_index_in_order(row, entity))
        else:  # pragma: no cover - encode_entry validates ops
            raise wal.WalError(f"unknown op {entry.op}")

    def _index_entity(self, entity: TopicEntity) -> None:
        self._entities[entity.id] = entity
        insort(self._order[entity.topic], entity, key=_order_key)

    def _index_relation(self, rel: Relation) -> None:
        self._relations[(rel.kind, rel.from_id, rel.to_id)] = rel
        self._rel_from.setdefault((rel.kind, rel.from_id), []).append(rel.to_id)
        self._rel_to.setdefault((rel.kind, rel.to_id), []).append(rel.from_id)

    # --- read path --------------------------------------------------------

    def _check_page(self, page: int, page_size: int) -> None:
        if page < 0 or not 1 <= page_size <= MAX_PAGE_SIZE:
            raise PageSizeOutOfRange(
                f"page must be >= 0 and page_size in [1, {MAX_PAGE_SIZE}]"
            )

    def browse(self, topic: TopicKind, page: int, page_size: int):
        self._check_page(page, page_size)
        with self._lock.read():
            rows = self._order[topic]
            lo = page * page_size
            return len(rows), rows[lo : lo + page_size]

    def get_entity(self, entity_id: bytes) -> TopicEntity | None:
        with self._lock.read():
            return self._entities.get(entity_id)

    def entity_relations(self, entity_id: bytes) -> list[Relation]:
        with self._lock.read():
            return self._incident_relations(entity_id)

    def _incident_relations(self, entity_id: bytes) -> list[Relation]:
        out = []
        for kind in RelationKind:
            for to_id in self._rel_from.get((kind, entity_id), ()):
                out.append(self._relations[(kind, entity_id, to_id)])
            for from_id in self._rel_to.get((kind, entity_id), ()):
                if from_id != entity_id:  # self edges already listed
                    out.append(self._relations[(kind, from_id, entity_id)])
        out.sort(key=lambda r: (r.kind.value, r.from_id, r.to_id))
        return out

    def conditional(self, topic: TopicKind, pred: pred_mod.Predicate | None,
                    page: int, page_size: int):
        self._check_page(page, page_size)
        with self._lock.read():
            rows = self._scan(topic, pred)
            lo = page * page_size
            return len(rows), rows[lo : lo + page_size]

    def _scan(self, topic: TopicKind, pred: pred_mod.Predicate | None) -> list[TopicEntity]:
        rows = self._order[topic]
        if pred is None:
            return list(rows)
        return [e for e in rows if pred_mod.evaluate(pred, e)]

    def match_ids(self, topic: TopicKind, pred: pred_mod.Predicate | None) -> set[bytes]:
        """Unpaginated id set for a predicate; seeds composed pipelines."""
        with self._lock.read():
            return {e.id for e in self._scan(topic, pred)}

    @staticmethod
    def joint_signature(relation: RelationKind, direction: str) -> tuple[TopicKind, TopicKind]:
        """(anchor topic, result topic) for a hop along ``relation``."""
        if direction not in ("from", "to"):
            raise RelationTopicMismatch(f"direction must be 'from' or 'to', got {direction!r}")
        want_from, want_to = RELATION_ENDPOINTS[relation]
        return (want_from, want_to) if direction == "from" else (want_to, want_from)

    def joint(self, anchor_topic: TopicKind, anchor_predicate: pred_mod.Predicate | None,
              relation: RelationKind, direction: str = "from") -> list[TopicEntity]:
        """Entities related to any anchor via one relation hop,
        deduplicated and in browse order."""
        anchor_expected, _ = self.joint_signature(relation, direction)
        if anchor_topic is not anchor_expected:
            raise RelationTopicMismatch(
                f"{relation.value} with direction={direction} anchors on "
                f"{anchor_expected.value}, not {anchor_topic.value}"
            )
        with self._lock.read():
            anchors = self._scan(anchor_topic, anchor_predicate)
            ids = self._hop({e.id for e in anchors}, relation, direction)
            rows = [self._entities[i] for i in ids]
        rows.sort(key=_order_key)
        return rows

    def joint_ids(self, anchor_ids: set[bytes], relation: RelationKind,
                  direction: str = "from") -> set[bytes]:
        """One relation hop from an id set; building block for composed
        query pipelines."""
        self.joint_signature(relation, direction)
        with self._lock.read():
            return self._hop(anchor_ids, relation, direction)

    def _hop(self, anchor_ids: set[bytes], relation: RelationKind, direction: str) -> set[bytes]:
        adj = self._rel_from if direction == "from" else self._rel_to
        out: set[bytes] = set()
        for aid in anchor_ids:
            out.update(adj.get((relation, aid), ()))
        return out

    def entities_by_ids(self, ids: set[bytes]) -> list[TopicEntity]:
        with self._lock.read():
            rows = [self._entities[i] for i in ids if i in self._entities]
        rows.sort(key=_order_key)
        return rows

    def entity_count(self) -> int:
        with self._lock.read():
            return len(self._entities)

    # --- snapshots ----------------------------------------------------

    def _write_snapshot(self) -> None:
        # called with the write lock held
        assert self.meta_dir is not None
        if self._writer is not None:
            self._writer.fsync()
        doc = self._state_doc()
        path = self._snapshot_path(self.committed_lsn)
        _write_snapshot_file(path, doc)

    def _state_doc(self) -> dict:
        entities = []
        for topic in TopicKind:
            entities.extend(entity_doc(e) for e in self._order[topic])
        relations = [
            {
                "kind": r.kind.value,
                "from_id": r.from_id.hex(),
                "to_id": r.to_id.hex(),
                "created_at": format_timestamp(r.created_at),
            }
            for r in sorted(self._relations.values(),
                            key=lambda r: (r.kind.value, r.from_id, r.to_id))
        ]
        return {"lsn": self.committed_lsn, "entities": entities, "relations": relations}

    def snapshot_now(self) -> None:
        with self._lock.write():
            if self.meta_dir is not None:
                self._write_snapshot()

    # --- replication feed ---------------------------------------------

    def wal_since(self, lsn: int, limit: int = 512) -> list[bytes]:
        """Raw framed entries with LSN > ``lsn``, in order."""
        with self._lock.read():
            return list(self._wal_raws[lsn : lsn + limit])

    def apply_wal(self, raw_entries: list[bytes]) -> int:
        """Apply shipped entries on a replica; returns the new LSN.

        Entries must continue exactly at committed_lsn + 1; gaps and
        checksum failures raise before any state changes.
        """
        with self._lock.write():
            if self._closed:
                raise StoreClosed("store is closed")
            decoded = []
            expected = self.committed_lsn + 1
            for raw in raw_entries:
                entry = wal.decode_entry(raw)  # raises CrcMismatch
                if entry.lsn != expected:
                    raise wal.LsnGap(f"expected lsn {expected}, got {entry.lsn}")
                decoded.append((raw, entry))
                expected += 1
            for raw, entry in decoded:
                if self._writer is not None:
                    self._writer.append_raw(raw)
                self._wal_raws.append(raw)
                self._apply_entry(entry)
                self.committed_lsn = entry.lsn
                if self.meta_dir is not None and self.committed_lsn % self.snapshot_every == 0:
                    self._write_snapshot()
        with self.commit_cond:
            self.commit_cond.notify_all()
        return self.committed_lsn

    # --- lifecycle ------------------------------------------------------

    def flush(self) -> None:
        with self._lock.write():
            if self._writer is not None:
                self._writer.fsync()

    def close(self) -> None:
        with self._lock.write():
            if self._closed:
                return
            self._closed = True
            if self._writer is not None:
                self._writer.close()
                self._writer = None


def _index_in_order(rows: list[TopicEntity], entity: TopicEntity) -> int:
    from bisect import bisect_left

    key = _order_key(entity)
    i = bisect_left(rows, key, key=_order_key)
    while rows[i].id != entity.id:
        i += 1
    return i


def _write_snapshot_file(path: str, doc: dict) -> None:
    body = dumps_canonical(doc)
    raw = struct.pack("<I", len(body)) + body + struct.pack("<I", crc32c(body))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _read_snapshot(path: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise StoreError(f"snapshot {path} too short")
    (body_len,) = struct.unpack_from("<I", raw, 0)
    if len(raw) != body_len + 8:
        raise StoreError(f"snapshot {path} length mismatch")
    body = raw[4 : 4 + body_len]
    (want,) = struct.unpack_from("<I", raw, 4 + body_len)
    if crc32c(body) != want:
        raise StoreError(f"snapshot {path} checksum mismatch")
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"snapshot {path} unreadable: {exc}") from exc
