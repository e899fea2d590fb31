"""Entity documents: the five-topic data model on the client side.

Entities are encapsulated locally, validated before anything touches
the network, and serialized to the canonical document form the service
expects: compact JSON, fixed field order (id, topic, name, created_at,
attributes, relations), RFC 3339 timestamps with microseconds, byte
references as {"ref": token} objects.
"""

from __future__ import annotations

import json
import math
import re
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

from nstore_client.errors import ValidationError

TOPICS = ("Process", "Data", "Person", "Device", "Paradigm")

# relation kind -> (from topic, to topic); ProcessParent points child -> parent
RELATIONS = {
    "ProcessParent": ("Process", "Process"),
    "ProcessData": ("Process", "Data"),
    "PersonData": ("Person", "Data"),
    "DeviceData": ("Device", "Data"),
    "ProcessPerson": ("Process", "Person"),
    "ProcessDevice": ("Process", "Device"),
    "ProcessParadigm": ("Process", "Paradigm"),
}

MAX_NAME_BYTES = 256
_KIND_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")
_ID_RE = re.compile(r"[0-9a-f]{32}\Z")


@dataclass(frozen=True)
class ByteRef:
    """Reference to out-of-band binary content."""

    token: str


def new_id_hex() -> str:
    return uuid.uuid4().hex


def now_us() -> int:
    return time.time_ns() // 1000


def format_timestamp(us: int) -> str:
    dt = datetime.fromtimestamp(us // 1_000_000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{us % 1_000_000:06d}Z"


def _check_id(value: str, what: str) -> str:
    if not isinstance(value, str) or not _ID_RE.match(value):
        raise ValidationError(f"{what} must be 32 lowercase hex digits")
    return value


def _check_field_value(name, value):
    if isinstance(value, bool) or isinstance(value, str) or isinstance(value, ByteRef):
        return
    if isinstance(value, int):
        if not -(2**63) <= value < 2**63:
            raise ValidationError(f"field {name!r}: integer out of int64 range")
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValidationError(f"field {name!r}: non-finite float")
        return
    raise ValidationError(
        f"field {name!r}: values must be int, float, str, bool, or ByteRef"
    )


class Entity:
    """One topic entity under construction.

    Use the topic subclasses (ProcessEntity, DataEntity, ...);
    ``mount`` attaches attribute blocks, ``relate`` records edges that
    travel with this entity.
    """

    topic: str = ""

    def __init__(self, name: str, entity_id: str | None = None,
                 created_at_us: int | None = None):
        if self.topic not in TOPICS:
            raise ValidationError(f"unknown topic {self.topic!r}")
        if not isinstance(name, str) or not name:
            raise ValidationError("entity name must be a non-empty string")
        if len(name.encode("utf-8")) > MAX_NAME_BYTES:
            raise ValidationError(f"entity name exceeds {MAX_NAME_BYTES} bytes")
        self.id = _check_id(entity_id, "entity id") if entity_id else new_id_hex()
        self.name = name
        self.created_at_us = now_us() if created_at_us is None else int(created_at_us)
        self._blocks: list[tuple[str, dict]] = []
        self._relations: list[tuple[str, str, str]] = []

    def mount(self, kind: str, **fields) -> "Entity":
        """Attach one attribute block; a second block of the same kind
        is rejected locally, before anything is sent."""
        if not isinstance(kind, str) or not _KIND_RE.match(kind) or len(kind.encode()) > 64:
            raise ValidationError(f"invalid attribute kind {kind!r}")
        if any(k == kind for k, _ in self._blocks):
            raise ValidationError(f"attribute kind {kind!r} already mounted")
        for name, value in fields.items():
            _check_field_value(name, value)
        self._blocks.append((kind, dict(fields)))
        return self

    def relate(self, kind: str, from_id: str, to_id: str) -> "Entity":
        """Record a relation edge to ship with this entity. Endpoints
        this entity occupies are checked against the kind's signature."""
        if kind not in RELATIONS:
            raise ValidationError(f"unknown relation kind {kind!r}")
        from_id = _check_id(from_id, "from_id")
        to_id = _check_id(to_id, "to_id")
        want_from, want_to = RELATIONS[kind]
        if from_id == self.id and self.topic != want_from:
            raise ValidationError(
                f"{kind} needs a {want_from} on the from side, this entity is {self.topic}"
            )
        if to_id == self.id and self.topic != want_to:
            raise ValidationError(
                f"{kind} needs a {want_to} on the to side, this entity is {self.topic}"
            )
        if kind == "ProcessParent" and from_id == to_id:
            raise ValidationError("a process cannot be its own parent")
        key = (kind, from_id, to_id)
        if key in self._relations:
            raise ValidationError(f"duplicate relation {key}")
        self._relations.append(key)
        return self

    # -- serialization ---------------------------------------------------

    def to_doc(self) -> dict:
        def value_json(v):
            return {"ref": v.token} if isinstance(v, ByteRef) else v

        return {
            "id": self.id,
            "topic": self.topic,
            "name": self.name,
            "created_at": format_timestamp(self.created_at_us),
            "attributes": [
                {"kind": kind, "fields": {k: value_json(v) for k, v in fields.items()}}
                for kind, fields in self._blocks
            ],
            "relations": [
                {"kind": k, "from_id": f, "to_id": t}
                for k, f, t in sorted(self._relations)
            ],
        }

    def encode(self) -> bytes:
        return dumps_canonical(self.to_doc())


def dumps_canonical(doc) -> bytes:
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


class ProcessEntity(Entity):
    topic = "Process"


class DataEntity(Entity):
    topic = "Data"


class PersonEntity(Entity):
    topic = "Person"


class DeviceEntity(Entity):
    topic = "Device"


class ParadigmEntity(Entity):
    topic = "Paradigm"


def entity_from_doc(doc: dict) -> Entity:
    """Rebuild an Entity from a parsed canonical document (used for
    golden-vector checks and round-trips)."""
    classes = {cls.topic: cls for cls in
               (ProcessEntity, DataEntity, PersonEntity, DeviceEntity, ParadigmEntity)}
    topic = doc.get("topic")
    if topic not in classes:
        raise ValidationError(f"unknown topic {topic!r}")
    us = _parse_timestamp(doc["created_at"])
    entity = classes[topic](doc["name"], entity_id=doc["id"], created_at_us=us)
    for block in doc.get("attributes", []):
        fields = {
            k: ByteRef(v["ref"]) if isinstance(v, dict) else v
            for k, v in block["fields"].items()
        }
        entity.mount(block["kind"], **fields)
    for rel in doc.get("relations", []):
        entity.relate(rel["kind"], rel["from_id"], rel["to_id"])
    return entity


def _parse_timestamp(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1_000_000 + dt.microsecond
