"""Golden wire vectors: frames as hex, regenerable and diffable.

These files pin the byte-level contract (canonical entity documents,
chunk layout, CRC) so an independent client implementation can prove
byte-for-byte compatibility without talking to a server. Sample data is
described by a tiny integer-based generator (``value = ((frame *
channels + channel) % mod) * scale + offset``) whose terms are exact in
float64, so any language reproduces identical bytes.

Regenerate with ``python -m nstore.golden --out golden/``.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

import numpy as np

from nstore import wire
from nstore.model import (
    AttributeBlock,
    BytesRef,
    Relation,
    RelationKind,
    TopicEntity,
    TopicKind,
    dumps_canonical,
    entity_doc,
)
from nstore.store import relation_id

_BASE_US = 1_690_000_000_000_000


def _rng_id(rng: random.Random) -> bytes:
    return rng.getrandbits(128).to_bytes(16, "big")


def build_entities(count: int = 25, seed: int = 20_240_101) -> list[dict]:
    """Deterministic entity fixtures covering every value type, unicode
    names, empty and many-block attribute sets, and each relation kind."""
    rng = random.Random(seed)
    topics = list(TopicKind)
    known: dict[TopicKind, list[bytes]] = {t: [] for t in TopicKind}
    vectors = []
    for i in range(count):
        topic = topics[i % len(topics)]
        name = [
            f"plain-{i:02d}",
            f"试验-α-{i:02d}",
            "x" * 64,
            f"space name {i}",
            f"dash-name_{i}",
        ][i % 5]
        attributes: list[AttributeBlock] = []
        if topic is TopicKind.DATA:
            attributes.append(
                AttributeBlock(
                    "EEG",
                    {
                        "channels": rng.choice([8, 64, 65]),
                        "sampling_rate": float(rng.choice([250, 500, 1000])),
                        "notch_filtered": bool(rng.getrandbits(1)),
                    },
                )
            )
            if i % 2:
                attributes.append(
                    AttributeBlock(
                        "DataFile",
                        {
                            "path": f"/data/golden{i:02d}.bdf",
                            "size_bytes": rng.randrange(2**40),
                            "blob": BytesRef(f"blob-{i:02d}"),
                            "ratio": rng.randrange(1, 1000) / 64.0,  # dyadic float
                        },
                    )
                )
        elif topic is TopicKind.PERSON:
            attributes.append(
                AttributeBlock("SubjectProfile", {"age": 20 + i, "handedness": "right"})
            )
        elif topic is TopicKind.DEVICE:
            attributes.append(
                AttributeBlock("AmplifierSpec", {"vendor": "golden", "channels": 65})
            )
        elif topic is TopicKind.PARADIGM:
            attributes.append(AttributeBlock("ParadigmConfig", {"family": "SSVEP"}))

        entity = TopicEntity(
            id=_rng_id(rng),
            topic=topic,
            name=name,
            created_at=_BASE_US + i * 1_000_003,
            attributes=tuple(attributes),
        )
        relations = []
        if topic is TopicKind.DATA and known[TopicKind.PROCESS]:
            pid = rng.choice(known[TopicKind.PROCESS])
            relations.append(
                Relation(relation_id(RelationKind.PROCESS_DATA, pid, entity.id),
                         RelationKind.PROCESS_DATA, pid, entity.id, entity.created_at)
            )
            if known[TopicKind.PERSON]:
                sid = rng.choice(known[TopicKind.PERSON])
                relations.append(
                    Relation(relation_id(RelationKind.PERSON_DATA, sid, entity.id),
                             RelationKind.PERSON_DATA, sid, entity.id, entity.created_at)
                )
            if known[TopicKind.DEVICE]:
                did = rng.choice(known[TopicKind.DEVICE])
                relations.append(
                    Relation(relation_id(RelationKind.DEVICE_DATA, did, entity.id),
                             RelationKind.DEVICE_DATA, did, entity.id, entity.created_at)
                )
        elif topic is TopicKind.PROCESS and known[TopicKind.PROCESS] and i % 2:
            parent = known[TopicKind.PROCESS][-1]
            relations.append(
                Relation(relation_id(RelationKind.PROCESS_PARENT, entity.id, parent),
                         RelationKind.PROCESS_PARENT, entity.id, parent, entity.created_at)
            )
        known[topic].append(entity.id)

        doc = entity_doc(entity, relations)
        frame = wire.encode_frame(wire.FT_ENTITY, 0, dumps_canonical(doc))
        vectors.append({"name": f"entity-{i:02d}", "doc": doc, "frame_hex": frame.hex()})
    return vectors


_CHUNK_CASES = [
    # (name, channels, samples_per_channel, sequence, start_sample, end_of_stream, mod, scale, offset)
    ("single-zero-sample", 1, 1, 0, 0, False, 97, 0.0, 0.0),
    ("one-channel-ramp", 1, 16, 3, 48, False, 97, 0.5, -24.0),
    ("two-channel-small", 2, 5, 0, 0, False, 11, 0.25, -1.25),
    ("eeg-shape-65x250", 65, 250, 7, 1750, False, 251, 0.125, -15.0),
    ("mid-stream-64ch", 64, 100, 12, 1200, False, 127, 2.0, -126.0),
    ("end-flag-with-data", 3, 7, 2, 14, True, 13, 1.0, -6.0),
    ("empty-end-of-stream", 65, 0, 40, 10000, True, 97, 0.0, 0.0),
    ("max-amplitude", 4, 9, 1, 9, False, 5, 1048576.0, -2097152.0),
    ("negative-offsets", 8, 32, 5, 160, False, 61, 0.0625, -1.875),
    ("wide-short", 1024, 2, 0, 0, False, 17, 0.5, -4.0),
]


def synth_samples(channels: int, spc: int, mod: int, scale: float, offset: float) -> bytes:
    idx = np.arange(spc * channels, dtype=np.float64)
    values = np.mod(idx, float(mod)) * scale + offset
    return values.astype("<f8").tobytes()


def build_chunks(seed: int = 77) -> list[dict]:
    rng = random.Random(seed)
    vectors = []
    for name, channels, spc, seq, start, end, mod, scale, offset in _CHUNK_CASES:
        stream_id = _rng_id(rng)
        chunk = wire.StreamChunk(
            stream_id=stream_id,
            sequence=seq,
            start_sample=start,
            channel_count=channels,
            samples_per_channel=spc,
            samples=synth_samples(channels, spc, mod, scale, offset),
        )
        flags = wire.FLAG_END_OF_STREAM if end else 0
        frame = wire.encode_frame(wire.FT_CHUNK, flags, wire.pack_chunk(chunk))
        vectors.append(
            {
                "name": name,
                "stream_id": stream_id.hex(),
                "sequence": seq,
                "start_sample": start,
                "channels": channels,
                "samples_per_channel": spc,
                "end_of_stream": end,
                "samples": {"gen": "affine_mod", "mod": mod, "scale": scale,
                            "offset": offset},
                "frame_hex": frame.hex(),
            }
        )
    return vectors


def build_controls() -> list[dict]:
    docs = [
        ("empty-payload", None),
        ("ping", {"op": "ping"}),
        ("ack-chunk", {"op": "ack", "partition": 3, "offset": 12345,
                       "stream": "00112233445566778899aabbccddeeff", "seq": 7}),
    ]
    vectors = []
    for name, doc in docs:
        payload = b"" if doc is None else dumps_canonical(doc)
        frame = wire.encode_frame(wire.FT_CONTROL, 0, payload)
        vectors.append({"name": name, "doc": doc, "frame_hex": frame.hex()})
    return vectors


def build_all() -> dict[str, dict]:
    header = {
        "layout": "frame = NSTR | version 1 | type | flags | reserved 0 | "
                  "payload_len u32le | payload | crc32c u32le over all prior bytes",
        "samples": "affine_mod: value[i] = (i % mod) * scale + offset, "
                   "i = frame_index * channels + channel, float64 LE, sample-major",
    }
    return {
        "entity_frames.json": {"notes": header, "frames": build_entities()},
        "chunk_frames.json": {"notes": header, "frames": build_chunks()},
        "control_frames.json": {"notes": header, "frames": build_controls()},
    }


def write_vectors(out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, doc in build_all().items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, ensure_ascii=False, sort_keys=False)
            f.write("\n")
        written.append(path)
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="golden")
    args = parser.parse_args(argv)
    for path in write_vectors(args.out):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
