"""Load harness: concurrent query soak and simulated-device storage runs.

Two experiments, desk-scale by default:

* query load: N closed-loop virtual users (next request only after the
  previous response) all issuing the Data-topic joint query, started
  uniformly within a ramp-up window; latencies aggregated as mean,
  population std, and nearest-rank p99.
* storage load: N simulated acquisition devices, each pacing
  channels x rate x 8 bytes/s of float64 samples through the ingest
  path in real time; the reported speed comes from on-disk file sizes,
  never sender counters, and every stream is checksum-audited.

Reports are JSON documents plus a CSV of raw latencies.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from nstore import wire
from nstore.client import Publisher, RemoteBroker
from nstore.httpjson import HttpError, JsonHttp
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
from nstore.persist import read_nsl_sha256
from nstore.store import relation_id

log = logging.getLogger("nstore.bench")

MB = 1_000_000  # reports use decimal megabytes; MiB shown alongside


class BenchError(Exception):
    pass


class TargetUnreachable(BenchError):
    pass


class FixtureMissing(BenchError):
    pass


class DrainTimeout(BenchError):
    pass


# --- statistics -------------------------------------------------------------


def nearest_rank_p99(latencies) -> float:
    """99th percentile by the nearest-rank rule: the ceil(0.99*n)-th
    order statistic of the sorted sample."""
    arr = np.asarray(latencies, dtype=np.float64)
    if arr.size == 0:
        raise BenchError("p99 of an empty sample")
    rank = max(1, int(np.ceil(0.99 * arr.size)))  # 1-based
    return float(np.partition(arr, rank - 1)[rank - 1])


@dataclass
class MetricsReport:
    users: int
    loops: int
    total_requests: int
    errors: int
    retries: int
    elapsed_s: float
    requests_per_s: float
    mean_ms: float
    std_ms: float
    p99_ms: float
    median_ms: float
    cpu_avg_pct: float | None
    mem_avg_pct: float | None
    raw_latencies_path: str | None

    def to_doc(self) -> dict:
        return asdict(self)


@dataclass
class StorageReport:
    devices: int
    duration_s: float
    channels: int
    rate_hz: int
    bytes_on_disk: int
    sample_bytes_sent: int
    speed_mb_s: float
    speed_mib_s: float
    checksums_ok: bool
    cpu_avg_pct: float | None
    mem_avg_pct: float | None

    def to_doc(self) -> dict:
        return asdict(self)


class ResourceSampler:
    """System CPU%/mem% sampled on an interval; averages into reports.

    Falls back to empty results (and reports omit the columns) where
    the platform counters are unavailable.
    """

    def __init__(self, interval_s: float = 1.0):
        self.interval_s = interval_s
        self.samples: list[tuple[float, float, float]] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        try:
            import psutil

            self._psutil = psutil
        except ImportError:  # pragma: no cover
            self._psutil = None

    def __enter__(self) -> "ResourceSampler":
        if self._psutil is not None:
            self._psutil.cpu_percent(None)  # prime the counter
            self._thread = threading.Thread(target=self._run, name="res-sampler", daemon=True)
            self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.interval_s):
            cpu = self._psutil.cpu_percent(None)
            mem = self._psutil.virtual_memory().percent
            self.samples.append((time.time(), cpu, mem))

    def __exit__(self, *exc) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)

    def averages(self) -> tuple[float | None, float | None]:
        if not self.samples:
            return None, None
        cpu = sum(s[1] for s in self.samples) / len(self.samples)
        mem = sum(s[2] for s in self.samples) / len(self.samples)
        return round(cpu, 2), round(mem, 2)


# --- fixture ---------------------------------------------------------------

_TOPIC_MIX = (
    [TopicKind.DATA] * 4
    + [TopicKind.PROCESS] * 2
    + [TopicKind.PERSON] * 2
    + [TopicKind.DEVICE]
    + [TopicKind.PARADIGM]
)
_FIXTURE_BASE_US = 1_700_000_000_000_000


def generate_fixture(n_entities: int, seed: int) -> list[tuple[TopicEntity, list[Relation]]]:
    """Deterministic-by-seed population across all five topics.

    Roughly 40% Data / 20% Process / 20% Person / 10% Device / 10%
    Paradigm; relation edges only reference earlier entities, so
    insertion in order always satisfies referential integrity.
    """
    if n_entities < 1:
        raise BenchError("fixture needs n >= 1")
    rng = random.Random(seed)
    out: list[tuple[TopicEntity, list[Relation]]] = []
    by_topic: dict[TopicKind, list[TopicEntity]] = {t: [] for t in TopicKind}

    def pick(topic: TopicKind) -> TopicEntity | None:
        rows = by_topic[topic]
        return rng.choice(rows) if rows else None

    for i in range(n_entities):
        topic = rng.choice(_TOPIC_MIX)
        entity = TopicEntity(
            id=rng.getrandbits(128).to_bytes(16, "big"),
            topic=topic,
            name=f"{topic.value.lower()}-{i:06d}",
            created_at=_FIXTURE_BASE_US + i,
            attributes=_fixture_attributes(rng, topic),
        )
        relations: list[Relation] = []

        def edge(kind: RelationKind, from_e: TopicEntity, to_e: TopicEntity) -> None:
            relations.append(
                Relation(
                    relation_id(kind, from_e.id, to_e.id),
                    kind, from_e.id, to_e.id, entity.created_at,
                )
            )

        if topic is TopicKind.DATA:
            producer = pick(TopicKind.PROCESS)
            if producer is not None:
                edge(RelationKind.PROCESS_DATA, producer, entity)
            if rng.random() < 0.7:
                subject = pick(TopicKind.PERSON)
                if subject is not None:
                    edge(RelationKind.PERSON_DATA, subject, entity)
            if rng.random() < 0.5:
                device = pick(TopicKind.DEVICE)
                if device is not None:
                    edge(RelationKind.DEVICE_DATA, device, entity)
        elif topic is TopicKind.PROCESS:
            if rng.random() < 0.4:
                parent = pick(TopicKind.PROCESS)
                if parent is not None:
                    edge(RelationKind.PROCESS_PARENT, entity, parent)
            if rng.random() < 0.4:
                person = pick(TopicKind.PERSON)
                if person is not None:
                    edge(RelationKind.PROCESS_PERSON, entity, person)
            if rng.random() < 0.3:
                device = pick(TopicKind.DEVICE)
                if device is not None:
                    edge(RelationKind.PROCESS_DEVICE, entity, device)
            if rng.random() < 0.3:
                paradigm = pick(TopicKind.PARADIGM)
                if paradigm is not None:
                    edge(RelationKind.PROCESS_PARADIGM, entity, paradigm)

        out.append((entity, relations))
        by_topic[topic].append(entity)
    return out


def _fixture_attributes(rng: random.Random, topic: TopicKind) -> tuple[AttributeBlock, ...]:
    if topic is TopicKind.DATA:
        blocks = [
            AttributeBlock(
                "EEG",
                {
                    "channels": rng.choice([32, 64, 65, 128]),
                    "sampling_rate": float(rng.choice([250, 500, 1000])),
                },
            )
        ]
        if rng.random() < 0.5:
            blocks.append(
                AttributeBlock(
                    "DataFile",
                    {
                        "path": f"/data/run{rng.randrange(10_000):05d}.bdf",
                        "size_bytes": rng.randrange(10**9),
                        "blob": BytesRef(f"blob-{rng.randrange(10_000):05d}"),
                    },
                )
            )
        return tuple(blocks)
    if topic is TopicKind.PERSON:
        return (
            AttributeBlock(
                "SubjectProfile",
                {"age": rng.randrange(18, 80),
                 "handedness": rng.choice(["left", "right", "ambi"])},
            ),
        )
    if topic is TopicKind.DEVICE:
        return (
            AttributeBlock(
                "AmplifierSpec",
                {"vendor": rng.choice(["neurix", "gtec", "antneuro", "biosemi"]),
                 "channels": rng.choice([32, 64, 65])},
            ),
        )
    if topic is TopicKind.PARADIGM:
        return (
            AttributeBlock(
                "ParadigmConfig", {"family": rng.choice(["SSVEP", "ERP", "MI", "P300"])}
            ),
        )
    if rng.random() < 0.5:
        return (
            AttributeBlock(
                "ResultScore",
                {"score": round(rng.random() * 100, 3), "rank": rng.randrange(1, 33)},
            ),
        )
    return ()


def fixture_docs(n_entities: int, seed: int) -> list[bytes]:
    """Fixture as canonical document bytes (what actually gets sent)."""
    return [
        dumps_canonical(entity_doc(entity, relations))
        for entity, relations in generate_fixture(n_entities, seed)
    ]


def fixture_names(n_entities: int, seed: int, topic: TopicKind) -> list[str]:
    return [e.name for e, _ in generate_fixture(n_entities, seed) if e.topic is topic]


def load_fixture(ingest_addr: str, n_entities: int, seed: int, senders: int = 4) -> int:
    """Publish a fixture through the ingest path; returns entity count."""
    docs = fixture_docs(n_entities, seed)
    frames = [wire.encode_frame(wire.FT_ENTITY, 0, doc) for doc in docs]
    errors: list[Exception] = []

    def run(lane: int) -> None:
        try:
            pub = Publisher(ingest_addr)
            for frame in frames[lane::senders]:
                pub.publish_raw(frame)
            pub.close()
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(lane,)) for lane in range(senders)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise TargetUnreachable(f"fixture load failed: {errors[0]}")
    return len(docs)


# --- query load -------------------------------------------------------------


def run_query_load(
    target: str,
    users: int,
    loops: int = 3,
    rampup_s: float = 1.0,
    anchor_names: list[str] | None = None,
    out_dir: str | None = None,
    sample_resources: bool = True,
) -> MetricsReport:
    """Closed-loop virtual users issuing the Data-topic joint query."""
    probe = JsonHttp(target, timeout=5.0)
    try:
        status, _ = probe.get("/v1/health")
    except HttpError as exc:
        raise TargetUnreachable(f"query service at {target}: {exc}") from exc
    finally:
        probe.close()
    if status != 200:
        raise TargetUnreachable(f"query service at {target} returned {status}")
    if not anchor_names:
        raise FixtureMissing("no anchor names; load a fixture first")

    latencies: list[list[tuple[int, float]]] = [[] for _ in range(users)]
    errors = [0] * users
    retries = [0] * users
    start_barrier = threading.Barrier(users + 1)

    def virtual_user(index: int) -> None:
        client = JsonHttp(target)
        anchor = anchor_names[index % len(anchor_names)]
        body = {
            "predicate": {"field": "name", "op": "eq", "value": anchor},
            "relation": "ProcessData",
            "direction": "from",
            "page_size": 200,
        }
        start_barrier.wait()
        time.sleep(rampup_s * index / max(1, users))
        for loop in range(loops):
            begin = time.perf_counter()
            try:
                status, doc = client.post("/v1/Process/joint", body)
                if status != 200:
                    errors[index] += 1
                    continue
            except HttpError:
                errors[index] += 1
                continue
            latencies[index].append((loop, (time.perf_counter() - begin) * 1000.0))
        client.close()

    threads = [
        threading.Thread(target=virtual_user, args=(i,), name=f"vu-{i}") for i in range(users)
    ]
    for t in threads:
        t.start()
    with ResourceSampler() if sample_resources else _NullSampler() as sampler:
        start_barrier.wait()
        began = time.perf_counter()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - began
    cpu, mem = sampler.averages()

    flat = [ms for per_user in latencies for _, ms in per_user]
    total = len(flat)
    raw_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        raw_path = os.path.join(out_dir, f"latencies-u{users}.csv")
        with open(raw_path, "w") as f:
            f.write("user,loop,latency_ms\n")
            for user, per_user in enumerate(latencies):
                for loop, ms in per_user:
                    f.write(f"{user},{loop},{ms:.3f}\n")
    if not flat:
        raise BenchError("no requests completed")
    arr = np.asarray(flat)
    report = MetricsReport(
        users=users,
        loops=loops,
        total_requests=total,
        errors=sum(errors),
        retries=sum(retries),
        elapsed_s=round(elapsed, 3),
        requests_per_s=round(total / elapsed, 2) if elapsed > 0 else 0.0,
        mean_ms=float(arr.mean()),
        std_ms=float(arr.std()),  # population std
        p99_ms=nearest_rank_p99(arr),
        median_ms=float(np.median(arr)),
        cpu_avg_pct=cpu,
        mem_avg_pct=mem,
        raw_latencies_path=raw_path,
    )
    if report.total_requests != users * loops - report.errors:
        raise BenchError("request accounting mismatch")
    # p99 can sit below the mean on skewed samples, but never below the median
    if report.p99_ms < report.median_ms:
        raise BenchError("percentile accounting mismatch")
    return report


class _NullSampler:
    samples: list = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None

    def averages(self):
        return None, None


# --- storage load -----------------------------------------------------------


@dataclass
class _DeviceResult:
    stream_id: bytes
    sample_bytes: int
    sha256: str


def run_storage_load(
    ingest_addr: str,
    data_dir: str,
    devices: int,
    duration_s: float,
    channels: int = 65,
    rate_hz: int = 1000,
    drain=None,
    drain_timeout_s: float = 60.0,
    sample_resources: bool = True,
    run_tag: str | None = None,
) -> StorageReport:
    """Real-time paced EEG simulation through the ingest TCP path.

    ``drain`` is a callable waiting for the pipeline to quiesce (an
    embedded node handle provides one); with a remote node the harness
    polls the admin stats until consumers catch up.
    """
    tag = run_tag or f"{int(time.time())}"
    chunks_per_s = 4
    results: list[_DeviceResult] = []
    failures: list[Exception] = []
    start_barrier = threading.Barrier(devices + 1)
    ticks = int(round(duration_s * chunks_per_s))
    boundaries = [round(rate_hz * t / chunks_per_s) for t in range(ticks + 1)]

    def device(index: int) -> None:
        rng = np.random.default_rng(1000 + index)
        base = rng.normal(scale=20.0, size=(rate_hz, channels))
        entity = TopicEntity(
            id=rng.bytes(16), topic=TopicKind.DATA,
            name=f"bench-{tag}-dev{index:03d}",
            created_at=int(time.time_ns() // 1000),
            attributes=(
                AttributeBlock(
                    "EEG", {"channels": channels, "sampling_rate": float(rate_hz)}
                ),
            ),
        )
        digest = hashlib.sha256()
        sent = 0
        try:
            pub = Publisher(ingest_addr)
            pub.publish_raw(
                wire.encode_frame(
                    wire.FT_ENTITY, 0, dumps_canonical(entity_doc(entity))
                )
            )
            start_barrier.wait()
            t0 = time.monotonic()
            sample_clock = 0
            for tick in range(ticks):
                deadline = t0 + tick / chunks_per_s
                delay = deadline - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                frames = boundaries[tick + 1] - boundaries[tick]
                lo = boundaries[tick] % rate_hz
                rows = base[lo : lo + frames]
                if rows.shape[0] < frames:  # wrap the tile
                    rows = np.vstack((rows, base[: frames - rows.shape[0]]))
                chunk = wire.StreamChunk(
                    stream_id=entity.id,
                    sequence=tick,
                    start_sample=sample_clock,
                    channel_count=channels,
                    samples_per_channel=frames,
                    samples=rows.astype("<f8").tobytes(),
                )
                pub.publish_chunk(chunk)
                digest.update(chunk.samples)
                sent += len(chunk.samples)
                sample_clock += frames
            pub.publish_chunk(
                wire.end_of_stream_chunk(entity.id, ticks, sample_clock, channels),
                end_of_stream=True,
            )
            pub.close()
        except Exception as exc:  # noqa: BLE001
            failures.append(exc)
            try:
                start_barrier.abort()
            except threading.BrokenBarrierError:
                pass
            return
        results.append(_DeviceResult(entity.id, sent, digest.hexdigest()))

    threads = [threading.Thread(target=device, args=(i,), name=f"dev-{i}")
               for i in range(devices)]
    for t in threads:
        t.start()
    with ResourceSampler() if sample_resources else _NullSampler() as sampler:
        try:
            start_barrier.wait()
        except threading.BrokenBarrierError:
            pass
        began = time.monotonic()
        for t in threads:
            t.join()
        send_elapsed = time.monotonic() - began
    if failures:
        raise TargetUnreachable(f"device sender failed: {failures[0]}")
    cpu, mem = sampler.averages()

    if drain is not None:
        if not drain(drain_timeout_s):
            raise DrainTimeout(f"pipeline did not quiesce within {drain_timeout_s}s")

    streams_dir = os.path.join(data_dir, "streams")
    bytes_on_disk = 0
    checks_ok = True
    for result in results:
        path = os.path.join(streams_dir, f"{result.stream_id.hex()}.nsl")
        if not os.path.exists(path):
            checks_ok = False
            log.error("stream %s never reached disk", result.stream_id.hex())
            continue
        bytes_on_disk += os.path.getsize(path)
        disk_sha, _frames, _ch = read_nsl_sha256(path)
        if disk_sha != result.sha256:
            checks_ok = False
            log.error("stream %s checksum mismatch", result.stream_id.hex())

    duration = send_elapsed if devices else 0.0
    speed = bytes_on_disk / duration / MB if duration > 0 else 0.0
    return StorageReport(
        devices=devices,
        duration_s=round(duration, 3),
        channels=channels,
        rate_hz=rate_hz,
        bytes_on_disk=bytes_on_disk,
        sample_bytes_sent=sum(r.sample_bytes for r in results),
        speed_mb_s=round(speed, 4),
        speed_mib_s=round(bytes_on_disk / duration / (1 << 20), 4) if duration > 0 else 0.0,
        checksums_ok=checks_ok,
        cpu_avg_pct=cpu,
        mem_avg_pct=mem,
    )


def admin_drain(admin_addr: str, group: str = "persist"):
    """Drain check against a remote broker's admin port."""

    def wait(timeout_s: float) -> bool:
        rb = RemoteBroker(admin_addr)
        try:
            deadline = time.monotonic() + timeout_s
            while time.monotonic() < deadline:
                stats = rb.stats()
                cursors = stats.get("cursors", {}).get(group, {})
                heads = stats["heads"]
                if all(int(cursors.get(str(p), 0)) >= h for p, h in enumerate(heads)):
                    return True
                time.sleep(0.05)
            return False
        finally:
            rb.close()

    return wait


# --- embedded node -----------------------------------------------------


class EmbeddedNode:
    """Single-process node on ephemeral ports for self-contained runs."""

    def __init__(self, data_dir: str | None = None, partitions: int = 8, workers: int = 2):
        from nstore.runtime import Config, start

        self._tmp = None
        if data_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="nstore-bench-")
            data_dir = self._tmp.name
        self.data_dir = data_dir
        config = Config.load(
            None,
            {
                "persist.data_dir": data_dir,
                "persist.workers": workers,
                "broker.partitions": partitions,
                "broker.listen": "127.0.0.1:0",
                "broker.admin_listen": "127.0.0.1:0",
                "query.listen": "127.0.0.1:0",
            },
        )
        self.node = start(config)

    @property
    def ingest_addr(self) -> str:
        return self.node.ingest_server.addr

    @property
    def query_addr(self) -> str:
        return self.node.query_service.addr

    def drain(self, timeout_s: float = 60.0) -> bool:
        ok = self.node.drain(timeout_s)
        if ok:
            self.node.engine.flush()
        return ok

    def close(self) -> None:
        self.node.shutdown()
        if self._tmp is not None:
            self._tmp.cleanup()


# --- CLI ---------------------------------------------------------------


def _write_report(doc: dict, out: str | None) -> None:
    raw = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as f:
            f.write(raw + "\n")
        print(f"report written to {out}")
    print(raw)


def _cmd_fixture(args) -> int:
    if args.ingest:
        count = load_fixture(args.ingest, args.n, args.seed, senders=args.senders)
        if args.admin:
            if not admin_drain(args.admin)(args.drain_timeout):
                raise DrainTimeout("fixture did not finish persisting")
        print(f"published {count} fixture entities")
        return 0
    node = EmbeddedNode(args.data_dir)
    try:
        count = load_fixture(node.ingest_addr, args.n, args.seed, senders=args.senders)
        if not node.drain(args.drain_timeout):
            raise DrainTimeout("fixture did not finish persisting")
        print(f"published {count} fixture entities into {node.data_dir}")
        return 0
    finally:
        node.close()


def _sweep_range(spec: str) -> list[int]:
    lo, _, rest = spec.partition(":")
    hi, _, step = rest.partition(":")
    return list(range(int(lo), int(hi) + 1, int(step or "100")))


def _cmd_query(args) -> int:
    anchors = fixture_names(args.fixture_n, args.seed, TopicKind.PROCESS)
    node = None
    target = args.target
    if target is None:
        node = EmbeddedNode(args.data_dir)
        load_fixture(node.ingest_addr, args.fixture_n, args.seed)
        if not node.drain(120):
            raise DrainTimeout("fixture did not finish persisting")
        target = node.query_addr
    try:
        steps = _sweep_range(args.sweep) if args.sweep else [args.users]
        rows = []
        for users in steps:
            reps = []
            for _ in range(args.reps):
                report = run_query_load(
                    target, users, loops=args.loops, rampup_s=args.rampup,
                    anchor_names=anchors, out_dir=args.raw_dir,
                )
                reps.append(report.to_doc())
            row = reps[0] if args.reps == 1 else _average_rows(reps)
            rows.append(row)
            print(
                f"users={users} mean={row['mean_ms']:.2f}ms std={row['std_ms']:.2f}ms "
                f"p99={row['p99_ms']:.2f}ms errors={row['errors']} "
                f"rps={row['requests_per_s']}"
            )
        _write_report({"mode": "query", "rows": rows}, args.out)
        return 0
    finally:
        if node is not None:
            node.close()


def _average_rows(reps: list[dict]) -> dict:
    out = dict(reps[0])
    for key in ("mean_ms", "std_ms", "p99_ms", "median_ms", "requests_per_s", "elapsed_s"):
        out[key] = round(sum(r[key] for r in reps) / len(reps), 3)
    for key in ("total_requests", "errors", "retries"):
        out[key] = sum(r[key] for r in reps)
    out["repetitions"] = len(reps)
    return out


def _cmd_storage(args) -> int:
    devices = args.devices
    if args.paper_scale and not args.devices_given:
        devices = 20
    node = None
    ingest, data_dir, drain = args.ingest, args.data_dir, None
    if ingest is None:
        node = EmbeddedNode(args.data_dir)
        ingest, data_dir, drain = node.ingest_addr, node.data_dir, node.drain
    elif args.admin:
        drain = admin_drain(args.admin)
    if data_dir is None:
        raise BenchError("storage mode needs --data-dir to measure disk sizes")
    try:
        report = run_storage_load(
            ingest, data_dir, devices, args.duration,
            channels=args.channels, rate_hz=args.rate, drain=drain,
            drain_timeout_s=args.drain_timeout,
        )
        doc = report.to_doc()
        doc["mode"] = "storage"
        nominal = args.channels * args.rate * 8 / MB
        doc["nominal_mb_s_per_device"] = round(nominal, 4)
        if args.paper_scale:
            # reference point: 20 devices sustained 9.6 MB/s
            expected = 9.6 * devices / 20
            doc["paper_scale_expected_mb_s"] = expected
            doc["paper_scale_ok"] = bool(abs(report.speed_mb_s - expected) <= 0.2 * expected)
        _write_report(doc, args.out)
        print(
            f"devices={devices} speed={report.speed_mb_s:.3f} MB/s "
            f"({report.speed_mib_s:.3f} MiB/s) checksums_ok={report.checksums_ok}"
        )
        return 0 if report.checksums_ok else 1
    finally:
        if node is not None:
            node.close()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="nstore-bench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    fixture = sub.add_parser("fixture", help="generate and ingest a seeded fixture")
    fixture.add_argument("--n", type=int, default=100_000)
    fixture.add_argument("--seed", type=int, default=42)
    fixture.add_argument("--ingest", help="ingest address of a running node")
    fixture.add_argument("--admin", help="admin address, used to wait for drain")
    fixture.add_argument("--data-dir", help="embedded-node data dir (no --ingest)")
    fixture.add_argument("--senders", type=int, default=4)
    fixture.add_argument("--drain-timeout", type=float, default=300.0)

    query = sub.add_parser("query", help="closed-loop concurrent query load")
    query.add_argument("--users", type=int, default=100)
    query.add_argument("--loops", type=int, default=3)
    query.add_argument("--rampup", type=float, default=1.0)
    query.add_argument("--sweep", help="users sweep as lo:hi[:step], e.g. 100:600:100")
    query.add_argument("--reps", type=int, default=1, help="repetitions per step, averaged")
    query.add_argument("--target", help="query address of a running node")
    query.add_argument("--data-dir", help="embedded-node data dir (no --target)")
    query.add_argument("--fixture-n", type=int, default=10_000)
    query.add_argument("--seed", type=int, default=42)
    query.add_argument("--raw-dir", help="directory for raw latency CSVs")
    query.add_argument("--out", help="write the JSON report here")

    storage = sub.add_parser("storage", help="simulated-device storage throughput")
    storage.add_argument("--devices", type=int, default=1)
    storage.add_argument("--duration", type=float, default=60.0)
    storage.add_argument("--channels", type=int, default=65)
    storage.add_argument("--rate", type=int, default=1000)
    storage.add_argument("--ingest", help="ingest address of a running node")
    storage.add_argument("--admin", help="admin address, used to wait for drain")
    storage.add_argument("--data-dir", help="node data dir (for disk measurements)")
    storage.add_argument("--drain-timeout", type=float, default=60.0)
    storage.add_argument("--paper-scale", action="store_true",
                         help="check the 20-device reference point (±20%%)")
    storage.add_argument("--out", help="write the JSON report here")

    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    if args.command == "storage":
        args.devices_given = "--devices" in (argv if argv is not None else sys.argv)
    try:
        if args.command == "fixture":
            return _cmd_fixture(args)
        if args.command == "query":
            return _cmd_query(args)
        return _cmd_storage(args)
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
