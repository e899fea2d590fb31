import itertools

import pytest
from hypothesis import given, strategies as st

from nstore import model
from nstore.model import (
    AttributeBlock,
    BytesRef,
    DuplicateKind,
    EmptyName,
    InvalidKindName,
    NameTooLong,
    RELATION_ENDPOINTS,
    RelationKind,
    TopicKind,
    mount_attribute,
    new_entity,
    validate_relation,
)

TOPICS = list(TopicKind)


def entity(topic=TopicKind.DATA, name="e"):
    return new_entity(topic, name)


class TestNewEntity:
    def test_basic_construction(self):
        e = new_entity(TopicKind.DATA, "run3_eeg")
        assert e.topic is TopicKind.DATA
        assert e.name == "run3_eeg"
        assert e.attributes == ()
        assert len(e.id) == 16

    def test_empty_name_rejected(self):
        with pytest.raises(EmptyName):
            new_entity(TopicKind.PROCESS, "")

    def test_name_length_boundary(self):
        new_entity(TopicKind.PROCESS, "x" * 256)
        with pytest.raises(NameTooLong):
            new_entity(TopicKind.PROCESS, "x" * 257)
        # length is measured in UTF-8 bytes, not code points
        with pytest.raises(NameTooLong):
            new_entity(TopicKind.PROCESS, "é" * 129)

    def test_ids_unique_across_many_calls(self):
        ids = {new_entity(TopicKind.DATA, "d").id for _ in range(10_000)}
        assert len(ids) == 10_000


class TestMountAttribute:
    def test_mount_eeg_block(self):
        e = mount_attribute(entity(), AttributeBlock("EEG", {"channels": 65, "sampling_rate": 1000.0}))
        assert len(e.attributes) == 1
        assert e.attribute("EEG").fields["channels"] == 65

    def test_duplicate_kind_rejected(self):
        e = mount_attribute(entity(), AttributeBlock("EEG", {"channels": 65}))
        with pytest.raises(DuplicateKind):
            mount_attribute(e, AttributeBlock("EEG", {"channels": 64}))

    def test_mount_order_preserved(self):
        e = entity()
        e = mount_attribute(e, AttributeBlock("EEG", {}))
        e = mount_attribute(e, AttributeBlock("DataFile", {}))
        assert [b.kind for b in e.attributes] == ["EEG", "DataFile"]

    def test_original_entity_unchanged(self):
        e = entity()
        mount_attribute(e, AttributeBlock("EEG", {}))
        assert e.attributes == ()

    @pytest.mark.parametrize("kind", ["", "9lives", "has space", "a" * 65, "dash-ed"])
    def test_invalid_kind_names(self, kind):
        with pytest.raises(InvalidKindName):
            AttributeBlock(kind, {})

    def test_kind_set_commutes(self):
        a, b = AttributeBlock("EEG", {"channels": 65}), AttributeBlock("DataFile", {"path": "x"})
        e1 = mount_attribute(mount_attribute(entity(), a), b)
        e2 = mount_attribute(mount_attribute(entity(), b), a)
        assert {blk.kind for blk in e1.attributes} == {blk.kind for blk in e2.attributes}
        assert sorted(e1.attributes, key=lambda blk: blk.kind) == sorted(
            e2.attributes, key=lambda blk: blk.kind
        )

    def test_non_finite_float_rejected(self):
        with pytest.raises(model.ModelError):
            AttributeBlock("EEG", {"gain": float("inf")})

    def test_int64_bounds(self):
        AttributeBlock("A", {"v": 2**63 - 1})
        with pytest.raises(model.ModelError):
            AttributeBlock("A", {"v": 2**63})


class TestValidateRelation:
    def test_process_data_ok(self):
        p, d = entity(TopicKind.PROCESS), entity(TopicKind.DATA)
        assert validate_relation(RelationKind.PROCESS_DATA, p, d) is None

    def test_topic_mismatch(self):
        x, d = entity(TopicKind.PERSON), entity(TopicKind.DATA)
        v = validate_relation(RelationKind.DEVICE_DATA, x, d)
        assert v is not None and v.code == "TopicMismatch"

    def test_self_parent(self):
        p = entity(TopicKind.PROCESS)
        v = validate_relation(RelationKind.PROCESS_PARENT, p, p)
        assert v is not None and v.code == "SelfParent"

    def test_exhaustive_topic_pairs(self):
        # For each kind, exactly one of the 25 ordered topic pairs passes.
        left = {t: entity(t) for t in TOPICS}
        right = {t: entity(t) for t in TOPICS}
        for kind in RelationKind:
            accepted = [
                (a, b)
                for a, b in itertools.product(TOPICS, TOPICS)
                if validate_relation(kind, left[a], right[b]) is None
            ]
            assert accepted == [RELATION_ENDPOINTS[kind]]

    def test_no_data_paradigm_variant(self):
        pairs = set(RELATION_ENDPOINTS.values())
        assert (TopicKind.DATA, TopicKind.PARADIGM) not in pairs
        assert (TopicKind.PARADIGM, TopicKind.DATA) not in pairs


_field_values = st.one_of(
    st.booleans(),
    st.integers(min_value=-(2**63), max_value=2**63 - 1),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(max_size=20),
    st.builds(BytesRef, st.text(max_size=20)),
)

_blocks = st.builds(
    AttributeBlock,
    kind=st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,30}", fullmatch=True),
    fields=st.dictionaries(st.text(min_size=1, max_size=12), _field_values, max_size=5),
)


@given(st.lists(_blocks, max_size=6, unique_by=lambda b: b.kind))
def test_no_path_to_duplicate_kinds(blocks):
    e = entity()
    for b in blocks:
        e = mount_attribute(e, b)
    kinds = [b.kind for b in e.attributes]
    assert len(kinds) == len(set(kinds))
    for b in blocks:
        with pytest.raises(DuplicateKind):
            mount_attribute(e, AttributeBlock(b.kind, {}))


@given(
    st.sampled_from(TOPICS),
    st.text(min_size=1, max_size=60).filter(lambda s: 0 < len(s.encode()) <= 256),
    st.lists(_blocks, max_size=4, unique_by=lambda b: b.kind),
)
def test_document_roundtrip(topic, name, blocks):
    e = new_entity(topic, name)
    for b in blocks:
        e = mount_attribute(e, b)
    decoded, rels = model.decode_entity(model.encode_entity(e))
    assert decoded == e
    assert rels == []


def test_document_roundtrip_with_relations():
    p = entity(TopicKind.PROCESS)
    d = entity(TopicKind.DATA)
    rel = model.Relation(model.new_id(), RelationKind.PROCESS_DATA, p.id, d.id, d.created_at)
    decoded, rels = model.decode_entity(model.encode_entity(d, [rel]))
    assert decoded == d
    assert len(rels) == 1
    assert (rels[0].kind, rels[0].from_id, rels[0].to_id) == (rel.kind, rel.from_id, rel.to_id)


def test_document_field_order_and_float_form():
    e = model.TopicEntity(
        id=bytes(range(16)),
        topic=TopicKind.DATA,
        name="n",
        created_at=1_700_000_000_123_456,
        attributes=(AttributeBlock("EEG", {"rate": 1000.0, "on": True, "ref": BytesRef("f1")}),),
    )
    raw = model.encode_entity(e).decode()
    assert raw.startswith('{"id":"000102030405060708090a0b0c0d0e0f","topic":"Data","name":"n","created_at":')
    assert '"rate":1000.0' in raw  # float keeps its decimal point
    assert '"on":true' in raw
    assert '"ref":{"ref":"f1"}' in raw
    assert raw.index('"attributes"') < raw.index('"relations"')


def test_timestamp_roundtrip():
    us = 1_700_000_000_123_456
    text = model.format_timestamp(us)
    assert text == "2023-11-14T22:13:20.123456Z"
    assert model.parse_timestamp(text) == us


@pytest.mark.parametrize(
    "mangle",
    [
        lambda d: d.replace(b'"Data"', b'"Blob"'),
        lambda d: d[:-1],
        lambda d: d.replace(b'"id"', b'"xx"'),
        lambda d: b"[1,2]",
    ],
)
def test_bad_documents_rejected(mangle):
    doc = model.encode_entity(entity())
    with pytest.raises(model.BadDocument):
        model.decode_entity(mangle(doc))
