"""Stream a finalized EEG run and export it as a 24-bit BDF file.

Run: python demos/bdf_export.py
"""

import os

import numpy as np

from nstore import wire
from nstore.bdf import read_bdf
from nstore.bench import EmbeddedNode
from nstore.client import Publisher
from nstore.model import AttributeBlock, TopicKind, encode_entity, mount_attribute, new_entity
from nstore.runtime import main as nstore_cli

node = EmbeddedNode(partitions=4, workers=2)

run = new_entity(TopicKind.DATA, "bdf-demo-run")
run = mount_attribute(run, AttributeBlock("EEG", {"channels": 65, "sampling_rate": 1000.0}))

pub = Publisher(node.ingest_addr)
pub.publish_entity(encode_entity(run))

# 10 s of 65-channel pink-ish noise
rng = np.random.default_rng(7)
signal = np.cumsum(rng.normal(scale=1.0, size=(10_000, 65)), axis=0) * 0.1
for chunk in wire.chunk_samples(run.id, signal, 250):
    pub.publish_chunk(chunk)
pub.publish_chunk(wire.end_of_stream_chunk(run.id, 40, 10_000, 65), end_of_stream=True)
pub.close()
node.drain(30)

out = os.path.join(node.data_dir, "demo.bdf")
code = nstore_cli(["export-bdf", "--data-dir", node.data_dir, "--stream", run.id_hex, "--out", out])
assert code == 0

size = os.path.getsize(out)
print(f"file size {size} bytes; formula 256*(65+1) + 10*65*1000*3 = {256 * 66 + 10 * 65 * 1000 * 3}")

header, decoded = read_bdf(out)
print(f"reserved field: {header['reserved']!r}, records: {header['records']}, "
      f"channels: {header['channels']}, samples/record: {header['samples_per_record'][0]}")

err = np.abs(decoded - signal).max(axis=0)
ranges = np.array(header["physical_max"]) - np.array(header["physical_min"])
print(f"worst round-trip error: {err.max():.3e}")
print(f"worst error as fraction of the quantization bound: {(err / (1.01 * ranges / 2**24)).max():.2f}")

node.close()
print("done.")
