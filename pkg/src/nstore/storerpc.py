"""Control-frame RPC so persist and query can live apart from the store.

This is a correctness bridge for split-role deployments, not a
throughput path: calls are serialized per connection. Single-process
nodes wire the store in directly and never touch it.
"""

from __future__ import annotations

import logging
import socket
import threading

from nstore import predicate as pred_mod
from nstore.model import (
    Relation,
    RelationKind,
    TopicKind,
    entity_doc,
    entity_from_doc,
    format_timestamp,
    parse_timestamp,
)
from nstore.store import (
    CycleViolation,
    IntegrityViolation,
    MetaStore,
    PageSizeOutOfRange,
    RelationTopicMismatch,
    StoreClosed,
    relation_id,
)
from nstore.transport import FrameSocket, TransportError, connect, parse_addr

log = logging.getLogger("nstore.storerpc")

_ERRORS = {
    "IntegrityViolation": IntegrityViolation,
    "CycleViolation": CycleViolation,
    "StoreClosed": StoreClosed,
    "PageSizeOutOfRange": PageSizeOutOfRange,
    "RelationTopicMismatch": RelationTopicMismatch,
    "TypeMismatch": pred_mod.TypeMismatch,
    "UnknownField": pred_mod.UnknownField,
    "MalformedPredicate": pred_mod.MalformedPredicate,
}
_ERROR_TYPES = tuple(_ERRORS.values())


def _rel_doc(rel: Relation) -> dict:
    return {
        "kind": rel.kind.value,
        "from_id": rel.from_id.hex(),
        "to_id": rel.to_id.hex(),
        "created_at": format_timestamp(rel.created_at),
    }


def _rel_from_doc(doc: dict) -> Relation:
    kind = RelationKind(doc["kind"])
    from_id = bytes.fromhex(doc["from_id"])
    to_id = bytes.fromhex(doc["to_id"])
    return Relation(
        relation_id(kind, from_id, to_id), kind, from_id, to_id,
        parse_timestamp(doc["created_at"]),
    )


class StoreServer:
    """Serves a MetaStore's read and insert surface over TCP."""

    def __init__(self, store: MetaStore, listen: str):
        self.store = store
        host, port = parse_addr(listen)
        self._sock = socket.create_server((host, port), backlog=64)
        self.addr = f"{host}:{self._sock.getsockname()[1]}"
        self._stop = threading.Event()
        self._accept = threading.Thread(target=self._accept_loop, name="store-rpc", daemon=True)
        self._accept.start()

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
                target=self._serve, args=(FrameSocket(conn),),
                name=f"store-rpc-{peer[1]}", daemon=True,
            ).start()

    def _serve(self, fs: FrameSocket) -> None:
        try:
            while not self._stop.is_set():
                doc = fs.recv_control(timeout=None)
                if doc is None:
                    return
                try:
                    fs.send_control(self._dispatch(doc))
                except _ERROR_TYPES as exc:
                    fs.send_control(
                        {"op": "error", "code": type(exc).__name__, "message": str(exc)}
                    )
                except (KeyError, ValueError, TypeError) as exc:
                    fs.send_control(
                        {"op": "error", "code": "bad_request",
                         "message": f"{type(exc).__name__}: {exc}"}
                    )
        except (TransportError, OSError):
            pass
        finally:
            fs.close()

    def _dispatch(self, doc: dict) -> dict:
        op = doc.get("op")
        store = self.store
        if op == "insert_entity":
            entity, _ = entity_from_doc(doc["doc"])
            relations = [_rel_from_doc(r) for r in doc.get("relations", [])]
            return {"op": "ok", "inserted": store.insert_entity(entity, relations)}
        if op == "get_entity":
            entity = store.get_entity(bytes.fromhex(doc["id"]))
            return {"op": "entity", "doc": entity_doc(entity) if entity else None}
        if op == "entity_relations":
            rels = store.entity_relations(bytes.fromhex(doc["id"]))
            return {"op": "relations", "relations": [_rel_doc(r) for r in rels]}
        if op == "browse":
            total, rows = store.browse(TopicKind(doc["topic"]), doc["page"], doc["page_size"])
            return {"op": "rows", "total": total, "items": [entity_doc(e) for e in rows]}
        if op == "conditional":
            pred = pred_mod.parse(doc["predicate"]) if doc.get("predicate") else None
            total, rows = store.conditional(
                TopicKind(doc["topic"]), pred, doc["page"], doc["page_size"]
            )
            return {"op": "rows", "total": total, "items": [entity_doc(e) for e in rows]}
        if op == "joint":
            pred = pred_mod.parse(doc["predicate"]) if doc.get("predicate") else None
            rows = store.joint(
                TopicKind(doc["topic"]), pred,
                RelationKind(doc["relation"]), doc["direction"],
            )
            return {"op": "rows", "total": len(rows), "items": [entity_doc(e) for e in rows]}
        if op == "match_ids":
            pred = pred_mod.parse(doc["predicate"]) if doc.get("predicate") else None
            ids = store.match_ids(TopicKind(doc["topic"]), pred)
            return {"op": "ids", "ids": sorted(i.hex() for i in ids)}
        if op == "joint_ids":
            ids = store.joint_ids(
                {bytes.fromhex(h) for h in doc["ids"]},
                RelationKind(doc["relation"]), doc["direction"],
            )
            return {"op": "ids", "ids": sorted(i.hex() for i in ids)}
        if op == "entities_by_ids":
            rows = store.entities_by_ids({bytes.fromhex(h) for h in doc["ids"]})
            return {"op": "rows", "total": len(rows), "items": [entity_doc(e) for e in rows]}
        if op == "lsn":
            return {"op": "lsn", "lsn": store.committed_lsn}
        if op == "entity_count":
            return {"op": "count", "count": store.entity_count()}
        raise ValueError(f"unsupported store op {op!r}")

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        self._accept.join(timeout=2)


class RemoteStore:
    """Client-side twin of MetaStore's surface, one RPC per call."""

    def __init__(self, addr: str, timeout: float = 30.0):
        self.addr = addr
        self.timeout = timeout
        self._fs = connect(addr, timeout)
        self._lock = threading.Lock()

    def _call(self, doc: dict) -> dict:
        with self._lock:
            self._fs.send_control(doc)
            reply = self._fs.recv_control(timeout=self.timeout)
        if reply is None:
            raise TransportError("store rpc connection closed")
        if reply.get("op") == "error":
            exc = _ERRORS.get(reply.get("code", ""))
            if exc is not None:
                raise exc(reply.get("message", ""))
            raise TransportError(f"store rpc: {reply.get('code')}: {reply.get('message')}")
        return reply

    # mutations

    def insert_entity(self, entity, relations=()) -> bool:
        return bool(
            self._call(
                {
                    "op": "insert_entity",
                    "doc": entity_doc(entity),
                    "relations": [_rel_doc(r) for r in relations],
                }
            )["inserted"]
        )

    # reads

    def get_entity(self, entity_id: bytes):
        doc = self._call({"op": "get_entity", "id": entity_id.hex()})["doc"]
        return entity_from_doc(doc)[0] if doc else None

    def entity_relations(self, entity_id: bytes) -> list[Relation]:
        reply = self._call({"op": "entity_relations", "id": entity_id.hex()})
        return [_rel_from_doc(r) for r in reply["relations"]]

    def _rows(self, reply: dict):
        return reply["total"], [entity_from_doc(d)[0] for d in reply["items"]]

    def browse(self, topic: TopicKind, page: int, page_size: int):
        return self._rows(
            self._call({"op": "browse", "topic": topic.value, "page": page,
                        "page_size": page_size})
        )

    def conditional(self, topic: TopicKind, pred, page: int, page_size: int):
        return self._rows(
            self._call({"op": "conditional", "topic": topic.value,
                        "predicate": pred_to_json(pred), "page": page,
                        "page_size": page_size})
        )

    def joint(self, topic: TopicKind, pred, relation: RelationKind, direction: str = "from"):
        return self._rows(
            self._call({"op": "joint", "topic": topic.value,
                        "predicate": pred_to_json(pred), "relation": relation.value,
                        "direction": direction})
        )[1]

    @staticmethod
    def joint_signature(relation: RelationKind, direction: str):
        return MetaStore.joint_signature(relation, direction)

    def match_ids(self, topic: TopicKind, pred) -> set[bytes]:
        reply = self._call({"op": "match_ids", "topic": topic.value,
                            "predicate": pred_to_json(pred)})
        return {bytes.fromhex(h) for h in reply["ids"]}

    def joint_ids(self, ids: set[bytes], relation: RelationKind, direction: str = "from"):
        reply = self._call({"op": "joint_ids", "ids": sorted(i.hex() for i in ids),
                            "relation": relation.value, "direction": direction})
        return {bytes.fromhex(h) for h in reply["ids"]}

    def entities_by_ids(self, ids: set[bytes]):
        return self._rows(
            self._call({"op": "entities_by_ids", "ids": sorted(i.hex() for i in ids)})
        )[1]

    @property
    def committed_lsn(self) -> int:
        return int(self._call({"op": "lsn"})["lsn"])

    def entity_count(self) -> int:
        return int(self._call({"op": "entity_count"})["count"])

    def close(self) -> None:
        self._fs.close()


def pred_to_json(pred) -> dict | None:
    """Back-convert a parsed predicate tree for the RPC payload."""
    if pred is None:
        return None
    if isinstance(pred, pred_mod.Leaf):
        value = pred.value
        from nstore.model import BytesRef

        if isinstance(value, BytesRef):
            value = {"ref": value.token}
        return {"field": pred.field, "op": pred.op, "value": value}
    if isinstance(pred, pred_mod.Not):
        return {"not": pred_to_json(pred.child)}
    if isinstance(pred, pred_mod.And):
        return {"and": [pred_to_json(c) for c in pred.children]}
    return {"or": [pred_to_json(c) for c in pred.children]}
