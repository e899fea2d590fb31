import math
import random

import numpy as np
import pytest

from nstore.bench import (
    EmbeddedNode,
    ResourceSampler,
    fixture_docs,
    fixture_names,
    generate_fixture,
    load_fixture,
    nearest_rank_p99,
    run_query_load,
    run_storage_load,
)
from nstore.model import RELATION_ENDPOINTS, TopicKind, validate_relation


def p99_oracle(values):
    ordered = sorted(values)
    rank = math.ceil(0.99 * len(ordered))  # 1-based nearest rank
    return ordered[rank - 1]


class TestP99:
    def test_equals_sort_oracle_on_random_vectors(self):
        rng = random.Random(123)
        for _ in range(10_000):
            n = rng.randrange(1, 400)
            values = [rng.uniform(0, 1000) for _ in range(n)]
            assert nearest_rank_p99(values) == p99_oracle(values)

    def test_known_vector(self):
        values = list(range(1, 101))  # 1..100 ms
        random.Random(5).shuffle(values)
        assert nearest_rank_p99(values) == 99

    def test_single_sample(self):
        assert nearest_rank_p99([42.0]) == 42.0

    def test_empty_raises(self):
        with pytest.raises(Exception):
            nearest_rank_p99([])


class TestFixture:
    def test_deterministic_by_seed(self):
        assert fixture_docs(500, 42) == fixture_docs(500, 42)
        assert fixture_docs(500, 42) != fixture_docs(500, 43)

    def test_topic_proportions(self):
        population = generate_fixture(5_000, 1)
        counts = {t: 0 for t in TopicKind}
        for entity, _ in population:
            counts[entity.topic] += 1
        total = sum(counts.values())
        assert abs(counts[TopicKind.DATA] / total - 0.4) < 0.05
        assert abs(counts[TopicKind.PROCESS] / total - 0.2) < 0.05
        assert abs(counts[TopicKind.PERSON] / total - 0.2) < 0.05
        assert abs(counts[TopicKind.DEVICE] / total - 0.1) < 0.03
        assert abs(counts[TopicKind.PARADIGM] / total - 0.1) < 0.03

    def test_relations_are_valid_and_resolvable(self):
        population = generate_fixture(2_000, 7)
        seen = {}
        for entity, relations in population:
            seen[entity.id] = entity
            for rel in relations:
                from_e = seen.get(rel.from_id, entity if rel.from_id == entity.id else None)
                to_e = seen.get(rel.to_id, entity if rel.to_id == entity.id else None)
                assert from_e is not None and to_e is not None
                assert validate_relation(rel.kind, from_e, to_e) is None

    def test_parent_edges_form_forest(self):
        population = generate_fixture(2_000, 9)
        parent = {}
        for entity, relations in population:
            for rel in relations:
                if rel.kind.value == "ProcessParent":
                    assert rel.from_id not in parent
                    parent[rel.from_id] = rel.to_id
        for start in parent:
            seen = {start}
            node = parent.get(start)
            while node is not None:
                assert node not in seen
                seen.add(node)
                node = parent.get(node)


@pytest.fixture(scope="module")
def small_node():
    node = EmbeddedNode(partitions=4, workers=2)
    count = load_fixture(node.ingest_addr, 600, 42)
    assert node.drain(60)
    assert node.node.store.entity_count() == count
    yield node
    node.close()


class TestQueryLoad:
    def test_accounting_single_user(self, small_node):
        anchors = fixture_names(600, 42, TopicKind.PROCESS)
        report = run_query_load(
            small_node.query_addr, users=1, loops=3, rampup_s=0.0,
            anchor_names=anchors, sample_resources=False,
        )
        assert report.total_requests == 3
        assert report.errors == 0
        assert report.total_requests == report.users * report.loops - report.errors

    def test_percentiles_sane(self, small_node):
        anchors = fixture_names(600, 42, TopicKind.PROCESS)
        report = run_query_load(
            small_node.query_addr, users=10, loops=3, rampup_s=0.1,
            anchor_names=anchors, sample_resources=False,
        )
        assert report.errors == 0
        assert report.p99_ms >= report.median_ms  # nearest-rank vs median
        assert report.mean_ms > 0

    def test_raw_latency_csv(self, small_node, tmp_path):
        anchors = fixture_names(600, 42, TopicKind.PROCESS)
        report = run_query_load(
            small_node.query_addr, users=2, loops=2, rampup_s=0.0,
            anchor_names=anchors, out_dir=str(tmp_path), sample_resources=False,
        )
        lines = open(report.raw_latencies_path).read().strip().splitlines()
        assert lines[0] == "user,loop,latency_ms"
        assert len(lines) == 1 + 4


class TestStorageLoad:
    def test_zero_length_run(self, small_node):
        report = run_storage_load(
            small_node.ingest_addr, small_node.data_dir, devices=1, duration_s=0,
            channels=4, rate_hz=100, drain=small_node.drain, sample_resources=False,
        )
        assert report.bytes_on_disk == 0
        assert report.speed_mb_s == 0 or report.duration_s < 0.5

    def test_short_run_volume_and_checksums(self, small_node):
        duration = 2.0
        rate, channels = 200, 3
        report = run_storage_load(
            small_node.ingest_addr, small_node.data_dir, devices=2,
            duration_s=duration, channels=channels, rate_hz=rate,
            drain=small_node.drain, sample_resources=False, run_tag="vol",
        )
        assert report.checksums_ok
        nominal = 2 * rate * channels * 8 * duration
        assert report.sample_bytes_sent == nominal
        # disk adds one 40-byte header per chunk (4 chunks/s/device)
        headers = 2 * int(duration * 4) * 40
        assert report.bytes_on_disk == nominal + headers


class TestResourceSampler:
    def test_samples_accumulate(self):
        import time

        with ResourceSampler(interval_s=0.05) as sampler:
            time.sleep(0.4)
        assert len(sampler.samples) >= 3
        cpu, mem = sampler.averages()
        assert 0 <= cpu <= 100
        assert 0 <= mem <= 100

    def test_busy_loop_raises_cpu(self):
        import threading
        import time

        with ResourceSampler(interval_s=0.05) as idle_sampler:
            time.sleep(0.35)
        idle_cpu, _ = idle_sampler.averages()

        stop = threading.Event()

        def burn():
            x = 0
            while not stop.is_set():
                x += 1

        burners = [threading.Thread(target=burn, daemon=True) for _ in range(4)]
        for b in burners:
            b.start()
        try:
            with ResourceSampler(interval_s=0.05) as busy_sampler:
                time.sleep(0.35)
        finally:
            stop.set()
        busy_cpu, _ = busy_sampler.averages()
        assert busy_cpu > idle_cpu
