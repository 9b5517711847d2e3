import random

import pytest
from hypothesis import given, settings, strategies as st

from factline.errors import ChecksumMismatch, Conflict, KeyExists, NotFound, ValidationFailed
from factline.model import AtomicFact, SourceKind, SourceRecord, ValueKind, make_fact_id
from factline.stores import BlobStore, Warehouse


@pytest.fixture
def store(tmp_path):
    return BlobStore(tmp_path / "blobs")


@pytest.fixture
def warehouse(tmp_path):
    return Warehouse(tmp_path / "warehouse.db")


class TestBlobStore:
    @pytest.mark.parametrize("size", [0, 1, 1024 * 1024])
    def test_round_trip_byte_identical(self, store, size):
        payload = random.Random(size).randbytes(size)
        bk = store.put("staging", f"blob-{size}", payload)
        assert bk.size_bytes == size
        assert store.get("staging", f"blob-{size}") == payload

    def test_round_trip_100mib(self, store):
        payload = random.Random(7).randbytes(100 * 1024 * 1024)
        store.put("staging", "big", payload)
        assert store.get("staging", "big") == payload

    def test_get_unknown_key(self, store):
        with pytest.raises(NotFound):
            store.get("staging", "nope")

    def test_duplicate_key_rejected(self, store):
        store.put("b", "k", b"one")
        with pytest.raises(KeyExists):
            store.put("b", "k", b"two")

    def test_if_absent_is_idempotent_for_identical_content(self, store):
        store.put("b", "k", b"same")
        bk = store.put("b", "k", b"same", if_absent=True)
        assert bk.checksum
        with pytest.raises(KeyExists):
            store.put("b", "k", b"different", if_absent=True)

    def test_checksum_verified_on_read(self, store):
        store.put("b", "k", b"payload")
        (store.root / "b" / "k").write_bytes(b"tampered")
        with pytest.raises(ChecksumMismatch):
            store.get("b", "k")


def _record(rid="rec1", patient="p1", category="vitals", payload="heart_rate|72|bpm"):
    return SourceRecord(record_id=rid, patient_id=patient, source_kind=SourceKind.SYNTHETIC_EHR,
                        category=category, payload=payload, received_at=0, batch_id="b1")


def _fact(patient="p1", concept="heart_rate", value=72.0, rid="rec1", group_key=None,
          version=1, eff=1000, unit="bpm"):
    return AtomicFact(
        fact_id=make_fact_id(patient, concept, eff, rid, group_key, version),
        patient_id=patient, concept=concept, value_kind=ValueKind.NUMBER, value=value,
        unit=unit, effective_time=eff, source_record_id=rid,
        translator_id="vitals", translator_version=version, group_key=group_key)


class TestUpsertFacts:
    def test_reinsert_is_noop(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        batch = [_fact(eff=t) for t in (1000, 2000, 3000)]
        first = warehouse.upsert_facts(batch, registry)
        assert first == {"inserted": 3, "deduplicated": 0, "conflicts": []}
        second = warehouse.upsert_facts(batch, registry)
        assert second["inserted"] == 0 and second["deduplicated"] == 3

    def test_group_key_distinguishes_facts(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact(group_key="g0"), _fact(group_key="g1")], registry)
        assert warehouse.fact_count() == 2

    def test_same_key_different_value_conflicts(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact(value=72.0)], registry)
        seen = []
        with pytest.raises(Conflict):
            warehouse.upsert_facts([_fact(value=99.0)], registry,
                                   on_conflict=lambda f, old: seen.append((f, old)))
        assert len(seen) == 1 and seen[0][1].value == 72.0

    def test_newer_version_supersedes(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact(value=72.0, version=1)], registry)
        warehouse.upsert_facts([_fact(value=73.0, version=2)], registry)
        active = warehouse.facts_for_concept("heart_rate")
        assert [f.value for f in active] == [73.0]
        assert warehouse.fact_count(active_only=False) == 2  # tombstone retained

    def test_stale_version_ignored(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact(value=73.0, version=2)], registry)
        result = warehouse.upsert_facts([_fact(value=72.0, version=1)], registry)
        assert result["deduplicated"] == 1
        assert [f.value for f in warehouse.facts_for_concept("heart_rate")] == [73.0]

    def test_validation_failure_lists_offenders(self, warehouse, registry):
        bad = _fact(rid="missing-record")
        with pytest.raises(ValidationFailed) as exc:
            warehouse.upsert_facts([bad], registry)
        assert bad.fact_id in exc.value.violations

    @settings(deadline=None, max_examples=25)
    @given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=1, max_value=20))
    def test_replay_leaves_state_identical(self, tmp_path_factory, registry, seed, n):
        rng = random.Random(seed)
        root = tmp_path_factory.mktemp("wh")
        wh = Warehouse(root / "w.db")
        wh.insert_source_records([_record()])
        batch = [_fact(eff=rng.randrange(10_000), patient=f"p{rng.randrange(3)}")
                 for _ in range(n)]
        # duplicates within a delivery and across deliveries must not change state
        wh.upsert_facts(batch, registry)
        baseline = wh.state_hash()
        replay = batch * 2
        rng.shuffle(replay)
        wh.upsert_facts(replay, registry)
        assert wh.state_hash() == baseline


class TestSnapshot:
    def test_snapshot_pins_reads(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact(eff=1000)], registry)
        snap = warehouse.snapshot()
        warehouse.upsert_facts([_fact(eff=2000)], registry)
        assert len(warehouse.facts_for_concept("heart_rate", snapshot=snap)) == 1
        assert len(warehouse.facts_for_concept("heart_rate")) == 2

    def test_no_writes_equal_marks(self, warehouse):
        a, b = warehouse.snapshot(), warehouse.snapshot()
        assert a.marks == b.marks

    def test_marks_monotone(self, warehouse, registry):
        a = warehouse.snapshot()
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact()], registry)
        b = warehouse.snapshot()
        assert b.marks["facts"] > a.marks["facts"]
        assert b.marks["source_records"] > a.marks["source_records"]

    def test_tombstones_after_snapshot_do_not_rewrite_history(self, warehouse, registry):
        warehouse.insert_source_records([_record()])
        warehouse.upsert_facts([_fact(value=72.0, version=1)], registry)
        snap = warehouse.snapshot()
        warehouse.upsert_facts([_fact(value=73.0, version=2)], registry)
        at_snap = warehouse.facts_for_concept("heart_rate", snapshot=snap)
        assert [f.value for f in at_snap] == [72.0]
