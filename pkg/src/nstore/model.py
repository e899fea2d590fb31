"""Five-topic entity model shared by every layer.

Entities belong to one of five topics (Process, Data, Person, Device,
Paradigm), carry mounted attribute blocks, and are linked by typed
relations. All types here are immutable values; operations return new
objects and are safe to call from any thread.

The canonical text encoding of an entity (used as Entity frame payloads
and by clients) is a compact JSON document with fields in this fixed
order: id, topic, name, created_at, attributes, relations. Integers are
decimal, floats use shortest round-trip form, and byte references are
encoded as {"ref": "<token>"} objects so they remain distinguishable
from plain strings.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Union

MAX_NAME_BYTES = 256
MAX_KIND_BYTES = 64

_KIND_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")


class ModelError(Exception):
    """Base class for domain-model violations."""


class EmptyName(ModelError):
    pass


class NameTooLong(ModelError):
    pass


class InvalidKindName(ModelError):
    pass


class DuplicateKind(ModelError):
    pass


class BadDocument(ModelError):
    """Canonical entity document failed to parse or validate."""


class TopicKind(str, Enum):
    PROCESS = "Process"
    DATA = "Data"
    PERSON = "Person"
    DEVICE = "Device"
    PARADIGM = "Paradigm"


class RelationKind(str, Enum):
    PROCESS_PARENT = "ProcessParent"
    PROCESS_DATA = "ProcessData"
    PERSON_DATA = "PersonData"
    DEVICE_DATA = "DeviceData"
    PROCESS_PERSON = "ProcessPerson"
    PROCESS_DEVICE = "ProcessDevice"
    PROCESS_PARADIGM = "ProcessParadigm"


# (from-topic, to-topic) signature for each relation kind. For
# ProcessParent the edge points from child to parent.
RELATION_ENDPOINTS: dict[RelationKind, tuple[TopicKind, TopicKind]] = {
    RelationKind.PROCESS_PARENT: (TopicKind.PROCESS, TopicKind.PROCESS),
    RelationKind.PROCESS_DATA: (TopicKind.PROCESS, TopicKind.DATA),
    RelationKind.PERSON_DATA: (TopicKind.PERSON, TopicKind.DATA),
    RelationKind.DEVICE_DATA: (TopicKind.DEVICE, TopicKind.DATA),
    RelationKind.PROCESS_PERSON: (TopicKind.PROCESS, TopicKind.PERSON),
    RelationKind.PROCESS_DEVICE: (TopicKind.PROCESS, TopicKind.DEVICE),
    RelationKind.PROCESS_PARADIGM: (TopicKind.PROCESS, TopicKind.PARADIGM),
}


@dataclass(frozen=True)
class BytesRef:
    """Opaque reference to out-of-band binary content (e.g. a file id)."""

    token: str


TypedValue = Union[int, float, str, bool, BytesRef]

# Attribute kinds used by the built-in tooling. EEG and DataFile carry
# signal shape and file metadata; the rest are generic placeholders for
# the non-Data topics.
BUILTIN_ATTRIBUTE_KINDS = (
    "EEG",
    "DataFile",
    "SubjectProfile",
    "AmplifierSpec",
    "ParadigmConfig",
    "ResultScore",
)


def _check_value(name: str, value: TypedValue) -> None:
    if isinstance(value, bool):
        return
    if isinstance(value, int):
        if not -(2**63) <= value < 2**63:
            raise ModelError(f"field {name!r}: integer out of int64 range")
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ModelError(f"field {name!r}: non-finite float")
        return
    if isinstance(value, (str, BytesRef)):
        return
    raise ModelError(f"field {name!r}: unsupported value type {type(value).__name__}")


@dataclass(frozen=True)
class AttributeBlock:
    """One named block of typed fields mounted on an entity.

    Field order is preserved; field names are unique by construction
    (a dict input cannot carry duplicates).
    """

    kind: str
    fields: dict[str, TypedValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.kind.encode("utf-8")) > MAX_KIND_BYTES or not _KIND_RE.match(self.kind):
            raise InvalidKindName(f"invalid attribute kind {self.kind!r}")
        for name, value in self.fields.items():
            if not isinstance(name, str) or not name:
                raise ModelError("attribute field names must be non-empty strings")
            _check_value(name, value)


@dataclass(frozen=True)
class TopicEntity:
    id: bytes  # 16 random bytes, printable as 32 hex digits
    topic: TopicKind
    name: str
    created_at: int  # UTC microseconds since epoch
    attributes: tuple[AttributeBlock, ...] = ()

    def __post_init__(self) -> None:
        if len(self.id) != 16:
            raise ModelError("entity id must be 16 bytes")
        _check_name(self.name)

    @property
    def id_hex(self) -> str:
        return self.id.hex()

    def attribute(self, kind: str) -> AttributeBlock | None:
        for block in self.attributes:
            if block.kind == kind:
                return block
        return None


@dataclass(frozen=True)
class Relation:
    id: bytes
    kind: RelationKind
    from_id: bytes
    to_id: bytes
    created_at: int

    def __post_init__(self) -> None:
        if len(self.id) != 16 or len(self.from_id) != 16 or len(self.to_id) != 16:
            raise ModelError("relation ids must be 16 bytes")


@dataclass(frozen=True)
class RelationViolation:
    code: str  # "TopicMismatch" | "SelfParent"
    detail: str


def new_id() -> bytes:
    return os.urandom(16)


def now_us() -> int:
    return time.time_ns() // 1000


def _check_name(name: str) -> None:
    if not name:
        raise EmptyName("entity name must be non-empty")
    if len(name.encode("utf-8")) > MAX_NAME_BYTES:
        raise NameTooLong(f"entity name exceeds {MAX_NAME_BYTES} bytes")


def new_entity(topic: TopicKind, name: str) -> TopicEntity:
    """Create an entity with a fresh random id and no attributes."""
    _check_name(name)
    return TopicEntity(id=new_id(), topic=topic, name=name, created_at=now_us())


def mount_attribute(entity: TopicEntity, block: AttributeBlock) -> TopicEntity:
    """Return a copy of ``entity`` with ``block`` appended.

    At most one block of a given kind may be mounted; mounting order is
    preserved.
    """
    if any(b.kind == block.kind for b in entity.attributes):
        raise DuplicateKind(f"attribute kind {block.kind!r} already mounted")
    return replace(entity, attributes=entity.attributes + (block,))


def validate_relation(
    kind: RelationKind, from_entity: TopicEntity, to_entity: TopicEntity
) -> RelationViolation | None:
    """Check endpoint topics against the relation signature.

    Returns None when the pair is acceptable, else a violation
    descriptor; never raises.
    """
    want_from, want_to = RELATION_ENDPOINTS[kind]
    if from_entity.topic is not want_from or to_entity.topic is not want_to:
        return RelationViolation(
            "TopicMismatch",
            f"{kind.value} requires {want_from.value}->{want_to.value}, "
            f"got {from_entity.topic.value}->{to_entity.topic.value}",
        )
    if kind is RelationKind.PROCESS_PARENT and from_entity.id == to_entity.id:
        return RelationViolation("SelfParent", "a process cannot be its own parent")
    return None


# --- canonical text encoding ----------------------------------------------

def format_timestamp(us: int) -> str:
    dt = datetime.fromtimestamp(us // 1_000_000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{us % 1_000_000:06d}Z"


def parse_timestamp(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1_000_000 + dt.microsecond


def _value_to_json(value: TypedValue):
    if isinstance(value, BytesRef):
        return {"ref": value.token}
    return value


def _value_from_json(name: str, raw) -> TypedValue:
    if isinstance(raw, dict):
        if set(raw) != {"ref"} or not isinstance(raw["ref"], str):
            raise BadDocument(f"field {name!r}: malformed byte reference")
        return BytesRef(raw["ref"])
    if isinstance(raw, (bool, int, float, str)):
        return raw
    raise BadDocument(f"field {name!r}: unsupported JSON value")


def entity_doc(entity: TopicEntity, relations: list[Relation] | tuple[Relation, ...] = ()) -> dict:
    """Build the canonical document for an entity plus its relation edges.

    Relations are listed in sorted (kind, from_id, to_id) order so the
    encoding of a given logical state is unique.
    """
    rels = sorted(relations, key=lambda r: (r.kind.value, r.from_id, r.to_id))
    return {
        "id": entity.id_hex,
        "topic": entity.topic.value,
        "name": entity.name,
        "created_at": format_timestamp(entity.created_at),
        "attributes": [
            {"kind": b.kind, "fields": {k: _value_to_json(v) for k, v in b.fields.items()}}
            for b in entity.attributes
        ],
        "relations": [
            {"kind": r.kind.value, "from_id": r.from_id.hex(), "to_id": r.to_id.hex()}
            for r in rels
        ],
    }


def dumps_canonical(doc) -> bytes:
    """Compact UTF-8 JSON; the only JSON form used on the wire."""
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode(
        "utf-8"
    )


def encode_entity(entity: TopicEntity, relations: list[Relation] | tuple[Relation, ...] = ()) -> bytes:
    return dumps_canonical(entity_doc(entity, relations))


def _parse_hex_id(text, what: str) -> bytes:
    if not isinstance(text, str) or len(text) != 32:
        raise BadDocument(f"{what}: expected 32 hex digits")
    try:
        return bytes.fromhex(text)
    except ValueError as exc:
        raise BadDocument(f"{what}: expected 32 hex digits") from exc


def decode_entity(data: bytes) -> tuple[TopicEntity, list[Relation]]:
    """Parse a canonical entity document from its wire bytes."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadDocument(f"not a JSON document: {exc}") from exc
    return entity_from_doc(doc)


def entity_from_doc(doc) -> tuple[TopicEntity, list[Relation]]:
    """Validate a parsed document.

    Relation edges get fresh ids and inherit the entity timestamp; their
    identity, for storage purposes, is (kind, from_id, to_id).
    """
    if not isinstance(doc, dict):
        raise BadDocument("document root must be an object")
    try:
        topic = TopicKind(doc["topic"])
        entity_id = _parse_hex_id(doc["id"], "id")
        name = doc["name"]
        created_at = parse_timestamp(doc["created_at"])
        raw_attrs = doc.get("attributes", [])
        raw_rels = doc.get("relations", [])
    except (KeyError, ValueError, TypeError) as exc:
        raise BadDocument(f"malformed entity document: {exc}") from exc

    if not isinstance(name, str):
        raise BadDocument("name must be a string")
    blocks: list[AttributeBlock] = []
    seen_kinds: set[str] = set()
    for raw in raw_attrs:
        try:
            kind = raw["kind"]
            fields = raw["fields"]
        except (KeyError, TypeError) as exc:
            raise BadDocument("malformed attribute block") from exc
        if not isinstance(fields, dict):
            raise BadDocument("attribute fields must be an object")
        if kind in seen_kinds:
            raise BadDocument(f"duplicate attribute kind {kind!r}")
        seen_kinds.add(kind)
        try:
            blocks.append(
                AttributeBlock(kind, {k: _value_from_json(k, v) for k, v in fields.items()})
            )
        except ModelError as exc:
            raise BadDocument(str(exc)) from exc

    try:
        entity = TopicEntity(
            id=entity_id,
            topic=topic,
            name=name,
            created_at=created_at,
            attributes=tuple(blocks),
        )
    except ModelError as exc:
        raise BadDocument(str(exc)) from exc

    relations: list[Relation] = []
    for raw in raw_rels:
        try:
            kind = RelationKind(raw["kind"])
            from_id = _parse_hex_id(raw["from_id"], "relation from_id")
            to_id = _parse_hex_id(raw["to_id"], "relation to_id")
        except (KeyError, ValueError, TypeError) as exc:
            raise BadDocument(f"malformed relation: {exc}") from exc
        relations.append(
            Relation(
                id=new_id(),
                kind=kind,
                from_id=from_id,
                to_id=to_id,
                created_at=entity.created_at,
            )
        )
    return entity, relations
