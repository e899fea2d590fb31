"""The committed golden vectors must match what the code generates, and
every committed frame must decode back to its own description."""

import json
import os

import numpy as np

from nstore import golden, wire
from nstore.model import decode_entity

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "..", "golden")


def load(name):
    with open(os.path.join(GOLDEN_DIR, name), encoding="utf-8") as f:
        return json.load(f)


def test_committed_vectors_are_current():
    built = golden.build_all()
    for name, want in built.items():
        committed = load(name)
        assert committed == json.loads(json.dumps(want)), f"{name} drifted; regenerate"


def test_entity_frames_decode_to_their_docs():
    doc = load("entity_frames.json")
    assert len(doc["frames"]) == 25
    for vec in doc["frames"]:
        frame, used = wire.decode_frame(bytes.fromhex(vec["frame_hex"]))
        assert used == len(vec["frame_hex"]) // 2
        assert frame.frame_type == wire.FT_ENTITY
        entity, relations = decode_entity(frame.payload)
        assert entity.id_hex == vec["doc"]["id"]
        assert entity.name == vec["doc"]["name"]
        assert json.loads(frame.payload.decode()) == vec["doc"]


def test_chunk_frames_decode_and_samples_match_generator():
    doc = load("chunk_frames.json")
    assert len(doc["frames"]) == 10
    for vec in doc["frames"]:
        frame, _ = wire.decode_frame(bytes.fromhex(vec["frame_hex"]))
        assert frame.frame_type == wire.FT_CHUNK
        assert frame.end_of_stream == vec["end_of_stream"]
        chunk = wire.unpack_chunk(frame.payload)
        assert chunk.stream_id.hex() == vec["stream_id"]
        assert chunk.sequence == vec["sequence"]
        assert chunk.start_sample == vec["start_sample"]
        assert chunk.channel_count == vec["channels"]
        assert chunk.samples_per_channel == vec["samples_per_channel"]
        gen = vec["samples"]
        want = golden.synth_samples(
            vec["channels"], vec["samples_per_channel"],
            gen["mod"], gen["scale"], gen["offset"],
        )
        assert chunk.samples == want


def test_control_frames_decode():
    doc = load("control_frames.json")
    for vec in doc["frames"]:
        frame, _ = wire.decode_frame(bytes.fromhex(vec["frame_hex"]))
        assert frame.frame_type == wire.FT_CONTROL
        if vec["doc"] is None:
            assert frame.payload == b""
        else:
            assert json.loads(frame.payload.decode()) == vec["doc"]


def test_crc_actually_guards_the_vectors():
    doc = load("chunk_frames.json")
    raw = bytearray(bytes.fromhex(doc["frames"][0]["frame_hex"]))
    raw[-5] ^= 0x01
    try:
        wire.decode_frame(bytes(raw))
    except wire.WireError:
        return
    raise AssertionError("corrupted golden frame still decoded")
