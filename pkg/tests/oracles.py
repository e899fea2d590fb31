"""Independent oracles for query semantics.

Everything here works on plain canonical documents and relation
triples, with its own field lookup, comparison, ordering, and graph
traversal code, so it shares no evaluation path with the store under
test.
"""

from __future__ import annotations

import random
from datetime import datetime, timezone

from nstore.model import (
    AttributeBlock,
    BytesRef,
    Relation,
    RelationKind,
    TopicEntity,
    TopicKind,
)

# --- doc-level predicate evaluation ----------------------------------------


def _ts_to_us(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1_000_000 + dt.microsecond


def _doc_field(doc: dict, field: str):
    if field == "id":
        return True, doc["id"]
    if field == "name":
        return True, doc["name"]
    if field == "created_at":
        return True, _ts_to_us(doc["created_at"])
    kind, _, name = field.partition(".")
    for block in doc["attributes"]:
        if block["kind"] == kind:
            if name in block["fields"]:
                return True, block["fields"][name]
            return False, None
    return False, None


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _oracle_eq(a, b):
    if _is_num(a) and _is_num(b):
        return a == b
    if isinstance(a, bool) and isinstance(b, bool):
        return a == b
    if isinstance(a, dict) or isinstance(b, dict):
        return isinstance(a, dict) and isinstance(b, dict) and a == b
    return type(a) is type(b) and a == b


def oracle_eval(pred: dict, doc: dict) -> bool:
    if "and" in pred:
        return all(oracle_eval(c, doc) for c in pred["and"])
    if "or" in pred:
        return any(oracle_eval(c, doc) for c in pred["or"])
    if "not" in pred:
        return not oracle_eval(pred["not"], doc)
    found, actual = _doc_field(doc, pred["field"])
    if not found:
        return False
    op, value = pred["op"], pred["value"]
    if op == "eq":
        return _oracle_eq(actual, value)
    if op == "neq":
        return not _oracle_eq(actual, value)
    if op == "contains":
        return value in actual
    if op == "in":
        return any(_oracle_eq(actual, v) for v in value)
    if op == "lt":
        return actual < value
    if op == "le":
        return actual <= value
    if op == "gt":
        return actual > value
    if op == "ge":
        return actual >= value
    raise AssertionError(op)


def oracle_order(docs: list[dict]) -> list[dict]:
    # RFC 3339 with fixed-width microseconds sorts chronologically as text
    return sorted(docs, key=lambda d: (d["created_at"], d["id"]))


def oracle_conditional(docs: list[dict], topic: str, pred: dict | None,
                       page: int, page_size: int):
    rows = [d for d in docs if d["topic"] == topic and (pred is None or oracle_eval(pred, d))]
    rows = oracle_order(rows)
    return len(rows), [d["id"] for d in rows[page * page_size : (page + 1) * page_size]]


def oracle_joint(docs: list[dict], triples: list[tuple[str, str, str]], topic: str,
                 pred: dict | None, relation: str, direction: str) -> list[str]:
    anchors = {
        d["id"]
        for d in docs
        if d["topic"] == topic and (pred is None or oracle_eval(pred, d))
    }
    hit = set()
    for kind, from_id, to_id in triples:
        if kind != relation:
            continue
        if direction == "from" and from_id in anchors:
            hit.add(to_id)
        elif direction == "to" and to_id in anchors:
            hit.add(from_id)
    rows = oracle_order([d for d in docs if d["id"] in hit])
    return [d["id"] for d in rows]


def oracle_composed(docs: list[dict], triples, seed_topic: str, seed_pred: dict | None,
                    steps: list[tuple[str, str]]) -> list[str]:
    current = {
        d["id"]
        for d in docs
        if d["topic"] == seed_topic and (seed_pred is None or oracle_eval(seed_pred, d))
    }
    for relation, direction in steps:
        nxt = set()
        for kind, from_id, to_id in triples:
            if kind != relation:
                continue
            if direction == "from" and from_id in current:
                nxt.add(to_id)
            elif direction == "to" and to_id in current:
                nxt.add(from_id)
        current = nxt
    rows = oracle_order([d for d in docs if d["id"] in current])
    return [d["id"] for d in rows]


# --- random population -------------------------------------------------

_REL_SIG = {
    "ProcessParent": ("Process", "Process"),
    "ProcessData": ("Process", "Data"),
    "PersonData": ("Person", "Data"),
    "DeviceData": ("Device", "Data"),
    "ProcessPerson": ("Process", "Person"),
    "ProcessDevice": ("Process", "Device"),
    "ProcessParadigm": ("Process", "Paradigm"),
}

_HANDS = ["left", "right", "ambi"]
_VENDORS = ["neurix", "biosemi", "antneuro", "gtec"]
_FAMILIES = ["SSVEP", "ERP", "MI", "P300"]


def build_population(rng: random.Random, n: int) -> list[tuple[TopicEntity, list[Relation]]]:
    """Deterministic mixed-topic population with valid relation edges.

    Edges only point at earlier entities (or self), so inserting in
    order always satisfies referential integrity; parent edges go child
    -> earlier process, which keeps the process graph a forest.
    """
    base_us = 1_690_000_000_000_000
    topics = (
        [TopicKind.DATA] * 4 + [TopicKind.PROCESS] * 2 + [TopicKind.PERSON] * 2
        + [TopicKind.DEVICE] + [TopicKind.PARADIGM]
    )
    out: list[tuple[TopicEntity, list[Relation]]] = []
    by_topic: dict[TopicKind, list[TopicEntity]] = {t: [] for t in TopicKind}
    ts = base_us
    for i in range(n):
        topic = rng.choice(topics)
        if rng.random() > 0.1:  # occasional duplicate timestamps for tie-breaks
            ts += rng.randrange(1, 2_000)
        entity = TopicEntity(
            id=rng.getrandbits(128).to_bytes(16, "big"),
            topic=topic,
            name=f"{topic.value.lower()}-{i:05d}",
            created_at=ts,
            attributes=_attrs_for(rng, topic),
        )
        rels = _edges_for(rng, entity, by_topic)
        out.append((entity, rels))
        by_topic[topic].append(entity)
    return out


def _attrs_for(rng: random.Random, topic: TopicKind) -> tuple[AttributeBlock, ...]:
    blocks = []
    if topic is TopicKind.DATA:
        if rng.random() < 0.9:
            blocks.append(
                AttributeBlock(
                    "EEG",
                    {
                        "channels": rng.choice([8, 32, 64, 65, 128]),
                        "sampling_rate": float(rng.choice([250, 500, 1000])),
                        "notch_filtered": rng.random() < 0.5,
                    },
                )
            )
        if rng.random() < 0.6:
            blocks.append(
                AttributeBlock(
                    "DataFile",
                    {
                        "path": f"/data/run{rng.randrange(100)}.bdf",
                        "size_bytes": rng.randrange(0, 10**9),
                        "blob": BytesRef(f"blob-{rng.randrange(1000):04d}"),
                    },
                )
            )
    elif topic is TopicKind.PERSON:
        blocks.append(
            AttributeBlock(
                "SubjectProfile",
                {"age": rng.randrange(18, 80), "handedness": rng.choice(_HANDS)},
            )
        )
    elif topic is TopicKind.DEVICE:
        blocks.append(
            AttributeBlock(
                "AmplifierSpec",
                {"vendor": rng.choice(_VENDORS), "channels": rng.choice([32, 64, 65])},
            )
        )
    elif topic is TopicKind.PARADIGM:
        blocks.append(AttributeBlock("ParadigmConfig", {"family": rng.choice(_FAMILIES)}))
    elif topic is TopicKind.PROCESS and rng.random() < 0.5:
        blocks.append(
            AttributeBlock(
                "ResultScore", {"score": round(rng.random() * 100, 3), "rank": rng.randrange(1, 33)}
            )
        )
    return tuple(blocks)


def _edges_for(rng: random.Random, entity: TopicEntity, by_topic) -> list[Relation]:
    def pick(topic: TopicKind) -> TopicEntity | None:
        rows = by_topic[topic]
        return rng.choice(rows) if rows else None

    edges: list[Relation] = []

    def add(kind_name: str, from_e: TopicEntity, to_e: TopicEntity) -> None:
        kind = RelationKind(kind_name)
        edges.append(Relation(bytes(16), kind, from_e.id, to_e.id, entity.created_at))

    if entity.topic is TopicKind.DATA:
        for _ in range(rng.randrange(1, 3)):
            p = pick(TopicKind.PROCESS)
            if p:
                add("ProcessData", p, entity)
        if rng.random() < 0.7:
            s = pick(TopicKind.PERSON)
            if s:
                add("PersonData", s, entity)
        if rng.random() < 0.5:
            d = pick(TopicKind.DEVICE)
            if d:
                add("DeviceData", d, entity)
    elif entity.topic is TopicKind.PROCESS:
        if rng.random() < 0.5:
            parent = pick(TopicKind.PROCESS)
            if parent:
                add("ProcessParent", entity, parent)
        if rng.random() < 0.4:
            s = pick(TopicKind.PERSON)
            if s:
                add("ProcessPerson", entity, s)
        if rng.random() < 0.4:
            d = pick(TopicKind.DEVICE)
            if d:
                add("ProcessDevice", entity, d)
        if rng.random() < 0.4:
            pa = pick(TopicKind.PARADIGM)
            if pa:
                add("ProcessParadigm", entity, pa)
    # dedup (kind, from, to) within the batch
    seen = set()
    uniq = []
    for r in edges:
        key = (r.kind, r.from_id, r.to_id)
        if key not in seen:
            seen.add(key)
            uniq.append(r)
    return uniq


# --- random predicates ------------------------------------------------

_NUM_FIELDS = [
    ("created_at", (1_690_000_000_000_000, 1_690_000_900_000_000)),
    ("EEG.channels", (8, 128)),
    ("EEG.sampling_rate", (250.0, 1000.0)),
    ("DataFile.size_bytes", (0, 10**9)),
    ("SubjectProfile.age", (18, 80)),
    ("AmplifierSpec.channels", (32, 65)),
    ("ResultScore.score", (0.0, 100.0)),
    ("ResultScore.rank", (1, 33)),
]
_STR_FIELDS = [
    ("name", ["data-", "process-", "person-", "-000", "-001", "zzz"]),
    ("DataFile.path", ["/data/", ".bdf", "run1", "run42"]),
    ("SubjectProfile.handedness", _HANDS),
    ("AmplifierSpec.vendor", _VENDORS),
    ("ParadigmConfig.family", _FAMILIES),
]


def random_predicate(rng: random.Random, depth: int = 0) -> dict:
    roll = rng.random()
    if depth < 3 and roll < 0.35:
        combin = rng.choice(["and", "or", "not"])
        if combin == "not":
            return {"not": random_predicate(rng, depth + 1)}
        return {combin: [random_predicate(rng, depth + 1) for _ in range(rng.randrange(2, 4))]}
    if rng.random() < 0.55:
        field, (lo, hi) = rng.choice(_NUM_FIELDS)
        op = rng.choice(["eq", "neq", "lt", "le", "gt", "ge", "in"])
        if isinstance(lo, float):
            value = round(rng.uniform(lo, hi), 1)
        else:
            value = rng.randrange(lo, hi + 1)
        if op == "in":
            return {"field": field, "op": op,
                    "value": [value, value + 1, rng.randrange(lo, hi + 1) if isinstance(lo, int) else round(rng.uniform(lo, hi), 1)]}
        return {"field": field, "op": op, "value": value}
    field, samples = rng.choice(_STR_FIELDS)
    op = rng.choice(["eq", "neq", "contains", "in"])
    value = rng.choice(samples)
    if op == "in":
        return {"field": field, "op": op, "value": [value, rng.choice(samples)]}
    return {"field": field, "op": op, "value": value}


JOINT_HOPS = [(name, direction) for name in _REL_SIG for direction in ("from", "to")]


def random_joint(rng: random.Random):
    """(anchor_topic, predicate|None, relation, direction) with a valid signature."""
    relation, direction = rng.choice(JOINT_HOPS)
    want_from, want_to = _REL_SIG[relation]
    anchor = want_from if direction == "from" else want_to
    pred = random_predicate(rng) if rng.random() < 0.7 else None
    return anchor, pred, relation, direction


def random_pipeline(rng: random.Random):
    """(seed_topic, seed_pred, [(relation, direction), ...]) of length <= 4."""
    relation, direction = rng.choice(JOINT_HOPS)
    sig = _REL_SIG[relation]
    seed_topic = sig[0] if direction == "from" else sig[1]
    steps = [(relation, direction)]
    current = sig[1] if direction == "from" else sig[0]
    for _ in range(rng.randrange(0, 3)):
        options = []
        for name, (f, t) in _REL_SIG.items():
            if f == current:
                options.append((name, "from", t))
            if t == current:
                options.append((name, "to", f))
        if not options:
            break
        name, d, nxt = rng.choice(options)
        steps.append((name, d))
        current = nxt
    seed_pred = random_predicate(rng) if rng.random() < 0.7 else None
    return seed_topic, seed_pred, steps
