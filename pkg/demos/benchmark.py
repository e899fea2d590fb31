"""Desk-scale flavor of both load experiments (a minute or two).

Run: python demos/benchmark.py
The real thing: nstore-bench query / nstore-bench storage (see README).
"""

from nstore.bench import (
    EmbeddedNode,
    fixture_names,
    load_fixture,
    run_query_load,
    run_storage_load,
)
from nstore.model import TopicKind

node = EmbeddedNode(partitions=8, workers=2)
print("loading a 2,000-entity fixture through the ingest path...")
load_fixture(node.ingest_addr, 2_000, seed=42)
node.drain(60)

anchors = fixture_names(2_000, 42, TopicKind.PROCESS)
for users in (25, 100):
    report = run_query_load(node.query_addr, users=users, loops=3, rampup_s=0.5,
                            anchor_names=anchors)
    print(f"query load, {users:>3} users x 3 loops: mean {report.mean_ms:7.2f} ms, "
          f"std {report.std_ms:7.2f} ms, p99 {report.p99_ms:7.2f} ms, "
          f"{report.requests_per_s:7.1f} req/s, errors {report.errors}")

print("\nstorage load, 2 simulated devices x 15 s at 65 ch / 1 kHz...")
report = run_storage_load(node.ingest_addr, node.data_dir, devices=2, duration_s=15,
                          drain=node.drain, run_tag="demo")
print(f"bytes on disk {report.bytes_on_disk:,} ({report.speed_mb_s:.3f} MB/s, "
      f"{report.speed_mib_s:.3f} MiB/s); nominal per device 0.520 MB/s; "
      f"checksums ok: {report.checksums_ok}")
if report.cpu_avg_pct is not None:
    print(f"cpu {report.cpu_avg_pct}%, mem {report.mem_avg_pct}%")

node.close()
print("done.")
