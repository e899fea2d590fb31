"""End-to-end walkthrough: start a node, stream data in, query it back.

Run: python demos/ingest_and_query.py
"""

import numpy as np

from nstore import wire
from nstore.bench import EmbeddedNode
from nstore.client import Publisher
from nstore.httpjson import JsonHttp
from nstore.model import (
    AttributeBlock,
    Relation,
    RelationKind,
    TopicKind,
    encode_entity,
    mount_attribute,
    new_entity,
    new_id,
)

node = EmbeddedNode(partitions=4, workers=2)
print(f"node up: ingest {node.ingest_addr}, query http://{node.query_addr}")

# --- sender side: a session with one subject producing one EEG run ---------

subject = new_entity(TopicKind.PERSON, "S01")
subject = mount_attribute(subject, AttributeBlock("SubjectProfile", {"age": 27, "handedness": "right"}))

amplifier = new_entity(TopicKind.DEVICE, "amp-01")
amplifier = mount_attribute(amplifier, AttributeBlock("AmplifierSpec", {"vendor": "biosemi", "channels": 65}))

session = new_entity(TopicKind.PROCESS, "session-2024-07-01")
run = new_entity(TopicKind.DATA, "run-1")
run = mount_attribute(run, AttributeBlock("EEG", {"channels": 65, "sampling_rate": 1000.0}))


def edge(kind, a, b):
    return Relation(new_id(), kind, a.id, b.id, b.created_at)


pub = Publisher(node.ingest_addr)
pub.publish_entity(encode_entity(subject))
pub.publish_entity(encode_entity(amplifier))
pub.publish_entity(encode_entity(session, [edge(RelationKind.PROCESS_PERSON, session, subject),
                                           edge(RelationKind.PROCESS_DEVICE, session, amplifier)]))
pub.publish_entity(encode_entity(run, [edge(RelationKind.PROCESS_DATA, session, run),
                                       edge(RelationKind.PERSON_DATA, subject, run),
                                       edge(RelationKind.DEVICE_DATA, amplifier, run)]))

# two seconds of synthetic 65-channel EEG, chunked and streamed in order
signal = np.random.default_rng(0).normal(scale=30.0, size=(2000, 65))
for chunk in wire.chunk_samples(run.id, signal, max_frames_per_chunk=250):
    ack = pub.publish_chunk(chunk)
print(f"streamed {signal.shape[0]} sample frames; last ack: {ack}")
pub.publish_chunk(wire.end_of_stream_chunk(run.id, 8, 2000, 65), end_of_stream=True)
pub.close()

node.drain(30)

# --- requester side: browse, conditional, joint, composed ------------------

http = JsonHttp(node.query_addr)

status, doc = http.get("/v1/Data/browse?page_size=10")
print(f"\nbrowse Data -> total {doc['total_count']}: {[i['name'] for i in doc['items']]}")

status, doc = http.post("/v1/Data/query", {
    "predicate": {"and": [
        {"field": "EEG.channels", "op": "ge", "value": 64},
        {"field": "name", "op": "contains", "value": "run"},
    ]}})
print(f"conditional (>=64ch, name contains 'run') -> {[i['name'] for i in doc['items']]}")

status, doc = http.post("/v1/Person/joint", {
    "predicate": {"field": "name", "op": "eq", "value": "S01"},
    "relation": "PersonData", "direction": "from"})
print(f"joint: S01's data -> {[i['name'] for i in doc['items']]}")

status, doc = http.post("/v1/Person/composed", {
    "seed_predicate": {"field": "name", "op": "eq", "value": "S01"},
    "steps": [
        {"relation": "PersonData", "direction": "from"},
        {"relation": "ProcessData", "direction": "to"},
    ]})
print(f"composed: processes that used S01's data -> {[i['name'] for i in doc['items']]}")

status, doc = http.get(f"/v1/Data/detail?id={run.id_hex}")
print(f"detail: attributes={doc['items'][0]['attributes']}")
print(f"        relations={len(doc['items'][0]['relations'])} edges")

http.close()
node.close()
print("\ndone.")
