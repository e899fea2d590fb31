import random

import pytest

from nstore import predicate, wal
from nstore.model import RelationKind, TopicKind, dumps_canonical, entity_doc
from nstore.replication import ReplicationClient, ReplicationServer
from nstore.store import MetaStore
from oracles import build_population


def fill(store, n=100, seed=8):
    rng = random.Random(seed)
    for entity, rels in build_population(rng, n):
        store.insert_entity(entity, rels)


def render(store, topic=TopicKind.DATA):
    total, rows = store.browse(topic, 0, 1000)
    return dumps_canonical(
        {"total": total, "items": [entity_doc(e, store.entity_relations(e.id)) for e in rows]}
    )


class TestApplyWal:
    def test_full_catchup_is_byte_identical(self, tmp_path):
        primary = MetaStore(str(tmp_path / "p"))
        replica = MetaStore(str(tmp_path / "r"))
        fill(primary, 100)
        replica.apply_wal(primary.wal_since(0, 10_000))
        assert replica.committed_lsn == primary.committed_lsn
        for topic in TopicKind:
            assert render(replica, topic) == render(primary, topic)
        pred = predicate.parse({"field": "EEG.channels", "op": "ge", "value": 64})
        assert [e.id for e in replica.conditional(TopicKind.DATA, pred, 0, 1000)[1]] == [
            e.id for e in primary.conditional(TopicKind.DATA, pred, 0, 1000)[1]
        ]
        assert [e.id for e in replica.joint(TopicKind.PROCESS, None, RelationKind.PROCESS_DATA)] == [
            e.id for e in primary.joint(TopicKind.PROCESS, None, RelationKind.PROCESS_DATA)
        ]
        primary.close()
        replica.close()

    def test_lsn_gap_detected(self, tmp_path):
        primary = MetaStore(str(tmp_path / "p"))
        replica = MetaStore(str(tmp_path / "r"))
        fill(primary, 10)
        raws = primary.wal_since(0, 100)
        replica.apply_wal(raws[:4])
        with pytest.raises(wal.LsnGap):
            replica.apply_wal([raws[4], raws[6]])
        # nothing from the bad batch may stick
        assert replica.committed_lsn == 4
        primary.close()
        replica.close()

    def test_crc_mismatch_detected(self, tmp_path):
        primary = MetaStore(str(tmp_path / "p"))
        replica = MetaStore(str(tmp_path / "r"))
        fill(primary, 3)
        raws = primary.wal_since(0, 100)
        bad = bytearray(raws[0])
        bad[10] ^= 0x40
        with pytest.raises(wal.CrcMismatch):
            replica.apply_wal([bytes(bad)])
        assert replica.committed_lsn == 0
        primary.close()
        replica.close()

    def test_lagging_replica_is_consistent_as_of_its_lsn(self, tmp_path):
        primary = MetaStore(str(tmp_path / "p"))
        fill(primary, 100)
        halfway = primary.committed_lsn // 2

        checkpoint = MetaStore(None)  # what the primary looked like at L
        checkpoint.apply_wal(primary.wal_since(0, halfway))
        replica = MetaStore(str(tmp_path / "r"))
        replica.apply_wal(primary.wal_since(0, halfway))

        assert replica.committed_lsn == halfway < primary.committed_lsn
        for topic in TopicKind:
            assert render(replica, topic) == render(checkpoint, topic)
        primary.close()
        replica.close()
        checkpoint.close()


class TestReplicationOverTcp:
    def test_tail_and_live_follow(self, tmp_path):
        primary = MetaStore(str(tmp_path / "p"))
        fill(primary, 40, seed=2)
        server = ReplicationServer(primary, "127.0.0.1:0")
        replica = MetaStore(str(tmp_path / "r"))
        client = ReplicationClient(replica, server.addr)
        try:
            assert client.wait_caught_up(primary.committed_lsn, timeout=10)
            for topic in TopicKind:
                assert render(replica, topic) == render(primary, topic)
            # live updates while subscribed
            fill(primary, 25, seed=3)
            assert client.wait_caught_up(primary.committed_lsn, timeout=10)
            assert render(replica) == render(primary)
            assert client.lag == 0
        finally:
            client.close()
            server.close()
            primary.close()
            replica.close()

    def test_replica_survives_restart_and_resubscribes(self, tmp_path):
        primary = MetaStore(str(tmp_path / "p"))
        fill(primary, 30, seed=4)
        server = ReplicationServer(primary, "127.0.0.1:0")
        rdir = str(tmp_path / "r")
        replica = MetaStore(rdir)
        client = ReplicationClient(replica, server.addr)
        assert client.wait_caught_up(primary.committed_lsn, timeout=10)
        client.close()
        replica.close()

        fill(primary, 10, seed=5)
        replica2 = MetaStore(rdir)  # recovers from its own wal copy
        assert replica2.committed_lsn >= 30
        client2 = ReplicationClient(replica2, server.addr)
        try:
            assert client2.wait_caught_up(primary.committed_lsn, timeout=10)
            assert render(replica2) == render(primary)
        finally:
            client2.close()
            server.close()
            primary.close()
            replica2.close()
