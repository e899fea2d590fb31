"""Byte-for-byte compatibility with the service's golden wire vectors.

Every frame here is rebuilt from its logical description using only
this SDK's encoder and must match the committed hex exactly.
"""

import json
import os

import numpy as np
import pytest

from nstore_client import entity_from_doc
from nstore_client import wire

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "golden")


def load(name):
    with open(os.path.join(GOLDEN_DIR, name), encoding="utf-8") as f:
        return json.load(f)


def synth_samples(channels: int, spc: int, gen: dict) -> bytes:
    assert gen["gen"] == "affine_mod"
    idx = np.arange(spc * channels, dtype=np.float64)
    values = np.mod(idx, float(gen["mod"])) * gen["scale"] + gen["offset"]
    return values.astype("<f8").tobytes()


entity_vectors = load("entity_frames.json")["frames"]
chunk_vectors = load("chunk_frames.json")["frames"]
control_vectors = load("control_frames.json")["frames"]


@pytest.mark.parametrize("vector", entity_vectors, ids=lambda v: v["name"])
def test_entity_frames_byte_equal(vector):
    entity = entity_from_doc(vector["doc"])
    frame = wire.encode_frame(wire.FT_ENTITY, 0, entity.encode())
    assert frame.hex() == vector["frame_hex"]


def test_all_25_entity_vectors_present():
    assert len(entity_vectors) == 25


@pytest.mark.parametrize("vector", chunk_vectors, ids=lambda v: v["name"])
def test_chunk_frames_byte_equal(vector):
    samples = synth_samples(
        vector["channels"], vector["samples_per_channel"], vector["samples"]
    )
    payload = wire.pack_chunk(
        bytes.fromhex(vector["stream_id"]),
        vector["sequence"],
        vector["start_sample"],
        vector["channels"],
        vector["samples_per_channel"],
        samples,
    )
    flags = wire.FLAG_END_OF_STREAM if vector["end_of_stream"] else 0
    frame = wire.encode_frame(wire.FT_CHUNK, flags, payload)
    assert frame.hex() == vector["frame_hex"]


def test_all_10_chunk_vectors_present():
    assert len(chunk_vectors) == 10


@pytest.mark.parametrize("vector", control_vectors, ids=lambda v: v["name"])
def test_control_frames_byte_equal(vector):
    payload = b"" if vector["doc"] is None else wire.control_doc(vector["doc"])
    frame = wire.encode_frame(wire.FT_CONTROL, 0, payload)
    assert frame.hex() == vector["frame_hex"]


@pytest.mark.parametrize("vector", chunk_vectors[:3], ids=lambda v: v["name"])
def test_vectors_decode_with_this_sdk_too(vector):
    frame, used = wire.decode_frame(bytes.fromhex(vector["frame_hex"]))
    assert used == len(vector["frame_hex"]) // 2
    assert frame.frame_type == wire.FT_CHUNK
    assert frame.payload[:16].hex() == vector["stream_id"]
