import hashlib
import itertools
import os
import random

import numpy as np
import pytest

from nstore import wire
from nstore.broker import Broker, QueueRecord
from nstore.model import (
    AttributeBlock,
    TopicKind,
    encode_entity,
    mount_attribute,
    new_entity,
)
from nstore.persist import (
    ChannelMismatch,
    MalformedPayload,
    NoPartitionsAvailable,
    OutcomeKind,
    PersistEngine,
    SequenceGap,
    SignalLog,
    WorkerPool,
)
from nstore.store import MetaStore

SID = bytes(range(16))


def record(frame_bytes, partition=0, offset=0, key=SID):
    return QueueRecord(partition, offset, key, 0, frame_bytes)


def chunk_record(chunk, offset=0, end=False):
    flags = wire.FLAG_END_OF_STREAM if end else 0
    return record(
        wire.encode_frame(wire.FT_CHUNK, flags, wire.pack_chunk(chunk)), offset=offset,
        key=chunk.stream_id,
    )


def make_chunks(matrix, max_frames=250, stream_id=SID):
    return wire.chunk_samples(stream_id, matrix, max_frames)


@pytest.fixture()
def engine(tmp_path):
    store = MetaStore(None)
    eng = PersistEngine(store, str(tmp_path), reorder_window=8)
    yield eng
    eng.close()
    store.close()


class TestHandleEntity:
    def test_insert_then_duplicate(self, engine):
        e = new_entity(TopicKind.PERSON, "s01")
        rec = record(wire.encode_frame(wire.FT_ENTITY, 0, encode_entity(e)), key=e.id)
        out = engine.handle_record(rec)
        assert out.kind is OutcomeKind.METADATA_INSERTED
        assert engine.store.get_entity(e.id) == e
        assert engine.handle_record(rec).kind is OutcomeKind.DUPLICATE

    def test_bad_document_quarantined(self, engine):
        rec = record(wire.encode_frame(wire.FT_ENTITY, 0, b"{nope"), offset=3)
        with pytest.raises(MalformedPayload):
            engine.handle_record(rec)
        names = os.listdir(engine.quarantine_dir)
        assert names and names[0].endswith("00000000000000000003.bin")

    def test_control_record_quarantined(self, engine):
        rec = record(wire.encode_frame(wire.FT_CONTROL, 0, b"{}"))
        with pytest.raises(MalformedPayload):
            engine.handle_record(rec)


class TestHandleChunk:
    def test_in_order_appends(self, engine):
        chunks = make_chunks(np.random.default_rng(0).normal(size=(500, 65)))
        out0 = engine.handle_record(chunk_record(chunks[0]))
        out1 = engine.handle_record(chunk_record(chunks[1], offset=1))
        assert out0.kind is out1.kind is OutcomeKind.SAMPLES_APPENDED
        slog = engine.stream(SID)
        assert slog.next_expected_sequence == 2
        assert slog.next_sample == 500

    def test_buffered_then_drained(self, engine):
        mat = np.arange(3 * 250 * 2, dtype=float).reshape(750, 2)
        c0, c1, c2 = make_chunks(mat)
        assert engine.handle_record(chunk_record(c2)).kind is OutcomeKind.BUFFERED
        assert engine.handle_record(chunk_record(c0)).kind is OutcomeKind.SAMPLES_APPENDED
        out = engine.handle_record(chunk_record(c1))
        assert out.kind is OutcomeKind.SAMPLES_APPENDED
        assert out.count == 500  # c1 plus drained c2
        slog = engine.stream(SID)
        np.testing.assert_array_equal(slog.read_matrix(), mat)

    def test_any_window_permutation_yields_identical_bytes(self, tmp_path):
        mat = np.random.default_rng(5).normal(size=(6 * 10, 3))
        chunks = make_chunks(mat, max_frames=10)
        reference = None
        for perm_index, perm in enumerate(itertools.permutations(range(6))):
            store = MetaStore(None)
            eng = PersistEngine(store, str(tmp_path / f"t{perm_index}"), reorder_window=8)
            for offset, i in enumerate(perm):
                eng.handle_record(chunk_record(chunks[i], offset=offset))
            data = open(eng.stream(SID).path, "rb").read()
            eng.close()
            store.close()
            if reference is None:
                reference = data
            assert data == reference

    def test_replay_leaves_file_identical(self, engine):
        chunks = make_chunks(np.ones((500, 4)))
        engine.handle_record(chunk_record(chunks[0]))
        engine.handle_record(chunk_record(chunks[1], offset=1))
        before = open(engine.stream(SID).path, "rb").read()
        assert engine.handle_record(chunk_record(chunks[0], offset=9)).kind is OutcomeKind.DUPLICATE
        assert open(engine.stream(SID).path, "rb").read() == before

    def test_beyond_window_gap_quarantines(self, engine):
        chunks = make_chunks(np.zeros((20 * 10, 1)), max_frames=10)
        engine.handle_record(chunk_record(chunks[0]))
        with pytest.raises(SequenceGap):
            engine.handle_record(chunk_record(chunks[15], offset=1))
        assert os.listdir(engine.quarantine_dir)

    def test_channel_mismatch_quarantined(self, engine):
        engine.handle_record(chunk_record(make_chunks(np.zeros((10, 65)))[0]))
        bad = wire.chunk_samples(SID, np.zeros((10, 64)), 250, start_sequence=1)[0]
        with pytest.raises(ChannelMismatch):
            engine.handle_record(chunk_record(bad, offset=1))

    def test_end_of_stream_finalizes(self, engine):
        chunks = make_chunks(np.zeros((100, 2)))
        engine.handle_record(chunk_record(chunks[0]))
        end = wire.end_of_stream_chunk(SID, 1, 100, 2)
        out = engine.handle_record(chunk_record(end, offset=1, end=True))
        assert out.kind is OutcomeKind.STREAM_FINALIZED
        slog = engine.stream(SID)
        assert slog.finalized
        assert slog.next_sample == 100  # empty chunk appends nothing
        # replayed end chunk stays idempotent
        assert engine.handle_record(chunk_record(end, offset=2, end=True)).kind is OutcomeKind.DUPLICATE

    def test_data_after_finalize_quarantined(self, engine):
        engine.handle_record(
            chunk_record(wire.end_of_stream_chunk(SID, 0, 0, 2), end=True)
        )
        late = wire.chunk_samples(SID, np.zeros((5, 2)), 10, start_sequence=0)[0]
        with pytest.raises(MalformedPayload):
            engine.handle_record(chunk_record(late, offset=1))


class TestAppendArithmetic:
    def test_bytes_written_matches_field_widths(self, engine):
        # 40-byte chunk header + 65 ch x 250 frames x 8 B
        chunk = make_chunks(np.zeros((250, 65)))[0]
        engine.handle_record(chunk_record(chunk))
        slog = engine.stream(SID)
        assert slog.bytes_written == 40 + 65 * 250 * 8 == 130_040
        assert os.path.getsize(slog.path) == 130_040


class TestSignalLogRecovery:
    def test_torn_tail_truncated(self, tmp_path):
        streams = str(tmp_path / "streams")
        slog = SignalLog(streams, SID)
        for chunk in make_chunks(np.random.default_rng(2).normal(size=(500, 3)), 100):
            slog.append(chunk)
        slog.close()
        path = slog.path
        good = os.path.getsize(path)
        with open(path, "ab") as f:
            f.write(b"\x01\x02\x03")  # torn partial header

        again = SignalLog(streams, SID)
        assert os.path.getsize(path) == good
        assert again.next_expected_sequence == 5
        assert again.next_sample == 500
        again.close()

    def test_partial_chunk_body_truncated(self, tmp_path):
        streams = str(tmp_path / "streams")
        slog = SignalLog(streams, SID)
        chunks = make_chunks(np.zeros((200, 2)), 100)
        slog.append(chunks[0])
        slog.close()
        size = os.path.getsize(slog.path)
        with open(slog.path, "ab") as f:
            f.write(wire.pack_chunk(chunks[1])[: 40 + 37])  # header + partial samples

        again = SignalLog(streams, SID)
        assert os.path.getsize(slog.path) == size
        assert again.next_expected_sequence == 1
        again.close()

    def test_counters_rebuilt_from_disk(self, tmp_path):
        streams = str(tmp_path / "streams")
        slog = SignalLog(streams, SID, sampling_rate_hz=500.0)
        mat = np.random.default_rng(3).normal(size=(123, 7))
        for chunk in make_chunks(mat, 50):
            slog.append(chunk)
        slog.finalize()
        slog.close()

        again = SignalLog(streams, SID)
        assert again.channel_count == 7
        assert again.sampling_rate_hz == 500.0
        assert again.finalized
        assert again.next_sample == 123
        np.testing.assert_array_equal(again.read_matrix(), mat)
        again.close()


def fill_broker_with_streams(broker, streams, seed=0):
    """Publish interleaved entity+chunk frames; returns stream checksums.

    Ids and payloads are seed-deterministic so runs are comparable.
    """
    from nstore.model import TopicEntity

    rng = np.random.default_rng(seed)
    id_rng = random.Random(seed)
    digests = {}
    publishes = []
    for stream_index in range(streams):
        e = TopicEntity(
            id_rng.getrandbits(128).to_bytes(16, "big"),
            TopicKind.DATA,
            f"stream-{stream_index}",
            1_700_000_000_000_000 + stream_index,
        )
        e = mount_attribute(e, AttributeBlock("EEG", {"channels": 4, "sampling_rate": 100.0}))
        mat = rng.normal(size=(rng.integers(50, 300), 4))
        digests[e.id] = hashlib.sha256(mat.astype("<f8").tobytes()).hexdigest()
        frames = [wire.encode_frame(wire.FT_ENTITY, 0, encode_entity(e))]
        chunks = wire.chunk_samples(e.id, mat, 25)
        frames.extend(wire.encode_frame(wire.FT_CHUNK, 0, wire.pack_chunk(c)) for c in chunks)
        end = wire.end_of_stream_chunk(e.id, len(chunks), mat.shape[0], 4)
        frames.append(
            wire.encode_frame(wire.FT_CHUNK, wire.FLAG_END_OF_STREAM, wire.pack_chunk(end))
        )
        publishes.append((e.id, frames))
    # interleave across streams to exercise multi-stream handling
    for batch in itertools.zip_longest(*(f for _, f in publishes)):
        for key, frame in zip((k for k, _ in publishes), batch):
            if frame is not None:
                broker.publish(key, frame)
    return digests


class TestWorkers:
    def test_worker_counts_equivalent(self, tmp_path):
        results = {}
        for count in (1, 4):
            data_dir = str(tmp_path / f"w{count}")
            broker = Broker(data_dir, partitions=4)
            digests = fill_broker_with_streams(broker, streams=6, seed=7)
            store = MetaStore(None)
            engine = PersistEngine(store, data_dir)
            pool = WorkerPool(engine, broker, count)
            assert pool.drain(20)
            pool.stop()
            state = {}
            for sid, want in digests.items():
                slog = engine.stream(sid)
                assert slog.sample_sha256() == want
                assert slog.finalized
                state[sid.hex()] = open(slog.path, "rb").read()
            assert store.browse(TopicKind.DATA, 0, 100)[0] == 6
            engine.close()
            store.close()
            broker.close()
            results[count] = state
        assert results[1] == results[4]

    def test_restart_resumes_without_loss_or_duplication(self, tmp_path):
        data_dir = str(tmp_path / "node")
        broker = Broker(data_dir, partitions=4)
        digests = fill_broker_with_streams(broker, streams=4, seed=11)
        store_dir = str(tmp_path / "meta")
        store = MetaStore(store_dir)
        engine = PersistEngine(store, data_dir)
        pool = WorkerPool(engine, broker, 2)
        # stop early to leave work unfinished and uncommitted
        pool.stop()
        engine.close()
        store.close()
        broker.close()

        broker2 = Broker(data_dir, partitions=4)
        store2 = MetaStore(store_dir)
        engine2 = PersistEngine(store2, data_dir)
        pool2 = WorkerPool(engine2, broker2, 2)
        assert pool2.drain(20)
        pool2.stop()
        for sid, want in digests.items():
            assert engine2.stream(sid).sample_sha256() == want
        assert store2.browse(TopicKind.DATA, 0, 100)[0] == 4
        engine2.close()
        store2.close()
        broker2.close()

    def test_out_of_order_entity_retries(self, tmp_path):
        # Data entity's relation references a Process that lands in a
        # different partition and is fetched later.
        data_dir = str(tmp_path / "node")
        broker = Broker(data_dir, partitions=2)
        from nstore.model import Relation, RelationKind
        from nstore.model import new_id

        p = new_entity(TopicKind.PROCESS, "proc")
        d = new_entity(TopicKind.DATA, "dat")
        rel = Relation(new_id(), RelationKind.PROCESS_DATA, p.id, d.id, d.created_at)
        # force different partitions by choosing ids; try until they differ
        while broker.partition_for_key(p.id) == broker.partition_for_key(d.id):
            p = new_entity(TopicKind.PROCESS, "proc")
            rel = Relation(new_id(), RelationKind.PROCESS_DATA, p.id, d.id, d.created_at)
        broker.publish(d.id, wire.encode_frame(wire.FT_ENTITY, 0, encode_entity(d, [rel])))
        broker.publish(p.id, wire.encode_frame(wire.FT_ENTITY, 0, encode_entity(p)))
        store = MetaStore(None)
        engine = PersistEngine(store, data_dir)
        pool = WorkerPool(engine, broker, 1, integrity_retry_s=10)
        assert pool.drain(15)
        pool.stop()
        assert store.get_entity(d.id) is not None
        assert len(store.entity_relations(d.id)) == 1
        assert not os.listdir(engine.quarantine_dir)
        engine.close()
        store.close()
        broker.close()

    def test_worker_count_validation(self, tmp_path):
        broker = Broker(str(tmp_path), partitions=2)
        store = MetaStore(None)
        engine = PersistEngine(store, str(tmp_path))
        with pytest.raises(NoPartitionsAvailable):
            WorkerPool(engine, broker, 3)
        engine.close()
        store.close()
        broker.close()
