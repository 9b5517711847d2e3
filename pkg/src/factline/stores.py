"""Shared stateful resources: the relational warehouse and the blob store.

Both are embedded (SQLite + filesystem directory) so a full deployment runs
with zero infrastructure; workers in separate processes coordinate through
these files only. Fact inserts are idempotent by natural key, which is what
makes at-least-once job delivery safe everywhere downstream.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
import uuid
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from . import model
from .errors import (
    ChecksumMismatch,
    Conflict,
    FactlineError,
    KeyExists,
    NotFound,
    ValidationFailed,
)
from .model import AtomicFact, ConceptRegistry, SourceRecord, ValueKind, utc_now_ms

FACT_BATCH_SIZE = 1000  # rows per insert transaction; keeps write locks short


def _connect(path: Path) -> sqlite3.Connection:
    conn = sqlite3.connect(path, timeout=60.0, isolation_level=None)
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA journal_mode=WAL")
    conn.execute("PRAGMA synchronous=NORMAL")
    conn.execute("PRAGMA busy_timeout=60000")
    conn.execute("PRAGMA cache_size=-8192")         # 8 MiB page cache
    conn.execute("PRAGMA mmap_size=268435456")      # read pages via mmap
    conn.execute("PRAGMA wal_autocheckpoint=8000")  # fewer checkpoint stalls
    return conn


def _migration_sql(name: str) -> str:
    return resources.files("factline").joinpath(f"config/migrations/{name}").read_text()


class _Database:
    """One SQLite file with per-thread connections and explicit transactions."""

    def __init__(self, path: str | Path, migration: str) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._migration = migration
        self._local = threading.local()
        self.connection().executescript(_migration_sql(migration))

    def connection(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = _connect(self.path)
            self._local.conn = conn
        return conn

    def execute(self, sql: str, params: Sequence | dict = ()) -> sqlite3.Cursor:
        return self.connection().execute(sql, params)

    def query(self, sql: str, params: Sequence | dict = ()) -> list[sqlite3.Row]:
        return self.connection().execute(sql, params).fetchall()

    def one(self, sql: str, params: Sequence | dict = ()) -> Optional[sqlite3.Row]:
        return self.connection().execute(sql, params).fetchone()

    def transaction(self):
        return _Transaction(self.connection())


class _Transaction:
    def __init__(self, conn: sqlite3.Connection) -> None:
        self.conn = conn

    def __enter__(self) -> sqlite3.Connection:
        self.conn.execute("BEGIN IMMEDIATE")
        return self.conn

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.conn.execute("COMMIT")
        else:
            self.conn.execute("ROLLBACK")


# ---------------------------------------------------------------------------
# Blob store
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlobKey:
    bucket: str
    key: str
    size_bytes: int
    checksum: str

    def path(self) -> str:
        return f"{self.bucket}/{self.key}"


class BlobStore:
    """Write-once file-like storage under a root directory.

    Layout is ``{root}/{bucket}/{key}``; content checksums live in a parallel
    metadata tree and are verified on every read.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _data_path(self, bucket: str, key: str) -> Path:
        p = (self.root / bucket / key).resolve()
        if not str(p).startswith(str(self.root.resolve())):
            raise ValueError(f"blob key escapes store root: {bucket}/{key}")
        return p

    def _meta_path(self, bucket: str, key: str) -> Path:
        return self.root / ".checksums" / bucket / (key + ".sha256")

    def put(self, bucket: str, key: str, data: bytes, if_absent: bool = False) -> BlobKey:
        """Store bytes under a new key. Keys are write-once: a second put of
        the same key raises KeyExists, unless ``if_absent`` is set and the
        content is identical (idempotent redelivery path).
        """
        digest = hashlib.sha256(data).hexdigest()
        path = self._data_path(bucket, key)
        if path.exists():
            existing = self._meta_path(bucket, key)
            if if_absent and existing.exists() and existing.read_text() == digest:
                return BlobKey(bucket, key, path.stat().st_size, digest)
            raise KeyExists(f"{bucket}/{key}")
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        meta = self._meta_path(bucket, key)
        meta.parent.mkdir(parents=True, exist_ok=True)
        meta.write_text(digest)
        tmp.replace(path)
        return BlobKey(bucket, key, len(data), digest)

    def get(self, bucket: str, key: str) -> bytes:
        path = self._data_path(bucket, key)
        if not path.exists():
            raise NotFound(f"{bucket}/{key}")
        data = path.read_bytes()
        meta = self._meta_path(bucket, key)
        if meta.exists():
            expected = meta.read_text().strip()
            actual = hashlib.sha256(data).hexdigest()
            if actual != expected:
                raise ChecksumMismatch(f"{bucket}/{key}: stored {expected}, read {actual}")
        return data

    def get_key(self, bucket: str, key: str) -> BlobKey:
        path = self._data_path(bucket, key)
        if not path.exists():
            raise NotFound(f"{bucket}/{key}")
        meta = self._meta_path(bucket, key)
        digest = meta.read_text().strip() if meta.exists() else ""
        return BlobKey(bucket, key, path.stat().st_size, digest)

    def exists(self, bucket: str, key: str) -> bool:
        return self._data_path(bucket, key).exists()

    def list_keys(self, bucket: str, prefix: str = "") -> list[str]:
        base = self.root / bucket
        if not base.exists():
            return []
        keys = []
        for p in base.rglob("*"):
            if p.is_file() and not p.name.endswith(".tmp"):
                rel = str(p.relative_to(base))
                if rel.startswith(prefix):
                    keys.append(rel)
        return sorted(keys)


# ---------------------------------------------------------------------------
# Warehouse
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WarehouseSnapshot:
    snapshot_id: str
    marks: dict[str, int]  # table -> max row sequence included

    @property
    def fact_mark(self) -> int:
        return self.marks.get("facts", 0)


_VALUE_COLUMNS = {
    ValueKind.NUMBER: "value_num",
    ValueKind.BOOLEAN: "value_bool",
    ValueKind.TEXT_CHOICE: "value_text",
    ValueKind.TIMESTAMP: "value_ts",
    ValueKind.SERIES_REF: "value_ref",
}


def _stored_value(fact: AtomicFact) -> dict[str, Any]:
    cols: dict[str, Any] = {c: None for c in _VALUE_COLUMNS.values()}
    if fact.value is not None:
        col = _VALUE_COLUMNS[fact.value_kind]
        value = fact.value
        if fact.value_kind is ValueKind.BOOLEAN:
            value = 1 if value else 0
        cols[col] = value
    return cols


def row_to_fact(row: sqlite3.Row) -> AtomicFact:
    kind = ValueKind(row["value_kind"])
    value: Any = None
    col = _VALUE_COLUMNS[kind]
    raw = row[col]
    if raw is not None:
        value = bool(raw) if kind is ValueKind.BOOLEAN else raw
    eff: model.EffectiveTime
    if row["eff_end"] is None:
        eff = row["eff_start"]
    else:
        eff = (row["eff_start"], row["eff_end"])
    return AtomicFact(
        fact_id=row["fact_id"],
        patient_id=row["patient_id"],
        concept=row["concept"],
        value_kind=kind,
        value=value,
        unit=row["unit"],
        effective_time=eff,
        source_record_id=row["source_record_id"],
        translator_id=row["translator_id"],
        translator_version=row["translator_version"],
        group_key=row["group_key"],
    )


def row_to_record(row: sqlite3.Row) -> SourceRecord:
    return SourceRecord(
        record_id=row["record_id"],
        patient_id=row["patient_id"],
        source_kind=model.SourceKind(row["source_kind"]),
        category=row["category"],
        payload=row["payload"],
        received_at=row["received_at"],
        batch_id=row["batch_id"],
        supersedes=row["supersedes"],
    )


class Warehouse(_Database):
    """The relational store: source records, facts, and all platform tables."""

    def __init__(self, path: str | Path) -> None:
        super().__init__(path, "0001_warehouse.sql")

    # -- sequence ------------------------------------------------------------

    def next_seq(self, count: int = 1) -> int:
        """Reserve ``count`` values from the global row sequence; returns the
        first reserved value. Must be called inside a transaction for writes.
        """
        row = self.one(
            "UPDATE counters SET value = value + ? WHERE name = 'rowseq' RETURNING value",
            (count,))
        return int(row[0]) - count + 1

    def current_seq(self) -> int:
        return int(self.one("SELECT value FROM counters WHERE name = 'rowseq'")[0])

    # -- source records --------------------------------------------------------

    def insert_source_records(self, records: Iterable[SourceRecord],
                              batch_id: Optional[str] = None,
                              memberships: Optional[Sequence[tuple[str, int]]] = None) -> int:
        """Stage records (idempotent by record id) and register their batch
        membership. ``memberships[i]`` is the (category, per-category position)
        of ``records[i]`` within the batch; block jobs reference those ranges.
        Returns the number of newly inserted records.
        """
        records = list(records)
        inserted = 0
        with self.transaction() as conn:
            seq = self.next_seq(len(records) or 1)
            for offset, rec in enumerate(records):
                cur = conn.execute(
                    "INSERT OR IGNORE INTO source_records "
                    "(record_id, patient_id, source_kind, category, payload, received_at,"
                    " batch_id, supersedes, seq) VALUES (?,?,?,?,?,?,?,?,?)",
                    (rec.record_id, rec.patient_id, rec.source_kind.value, rec.category,
                     rec.payload, rec.received_at, rec.batch_id, rec.supersedes, seq + offset))
                inserted += cur.rowcount
                if batch_id is not None and memberships is not None:
                    category, cat_seq = memberships[offset]
                    conn.execute(
                        "INSERT OR IGNORE INTO batch_records (batch_id, category, cat_seq,"
                        " record_id) VALUES (?,?,?,?)",
                        (batch_id, category, cat_seq, rec.record_id))
        return inserted

    def record_exists(self, record_id: str) -> bool:
        return self.one("SELECT 1 FROM source_records WHERE record_id = ?", (record_id,)) is not None

    def get_record(self, record_id: str) -> SourceRecord:
        row = self.one("SELECT * FROM source_records WHERE record_id = ?", (record_id,))
        if row is None:
            raise NotFound(f"source record {record_id}")
        return row_to_record(row)

    def records_for_block(self, batch_id: str, category: str,
                          start_seq: int, end_seq: int) -> list[SourceRecord]:
        rows = self.query(
            "SELECT r.* FROM batch_records b JOIN source_records r USING (record_id) "
            "WHERE b.batch_id = ? AND b.category = ? AND b.cat_seq >= ? AND b.cat_seq < ? "
            "ORDER BY b.cat_seq",
            (batch_id, category, start_seq, end_seq))
        return [row_to_record(r) for r in rows]

    def batch_category_counts(self, batch_id: str) -> dict[str, int]:
        rows = self.query(
            "SELECT category, COUNT(*) FROM batch_records WHERE batch_id = ? GROUP BY category",
            (batch_id,))
        return {r[0]: r[1] for r in rows}

    # -- facts -----------------------------------------------------------------

    def upsert_facts(self, facts: Sequence[AtomicFact], registry: ConceptRegistry,
                     raise_on_conflict: bool = True,
                     on_conflict: Optional[Callable[[AtomicFact, AtomicFact], None]] = None,
                     record_exists: Optional[Callable[[str], bool]] = None,
                     ) -> dict[str, Any]:
        """Idempotent batched fact insert.

        A fact's natural key is (patient, concept, effective time, source
        record, group key). Re-inserting an identical fact is a no-op; the
        same key at a newer translator version supersedes the old fact; the
        same key and version with a different value is a conflict, reported
        through ``on_conflict`` and (by default) raised. Callers that already
        hold the block's records pass a set-backed ``record_exists``.
        """
        exists = record_exists if record_exists is not None else self.record_exists
        violations = {}
        for fact in facts:
            report = model.validate_fact(fact, registry, record_exists=exists)
            if report:
                violations[fact.fact_id] = report
        if violations:
            raise ValidationFailed(violations)

        inserted = deduplicated = 0
        conflicts: list[AtomicFact] = []
        for start in range(0, len(facts), FACT_BATCH_SIZE):
            chunk = facts[start:start + FACT_BATCH_SIZE]
            n_ins, n_dup, chunk_conflicts = self._upsert_chunk(chunk)
            inserted += n_ins
            deduplicated += n_dup
            conflicts.extend(chunk_conflicts)
        for fact in conflicts:
            if on_conflict is not None:
                existing = self._active_fact_row(fact)
                on_conflict(fact, row_to_fact(existing) if existing is not None else None)
        if conflicts and raise_on_conflict:
            raise Conflict(f"{len(conflicts)} fact(s) conflict with stored values")
        return {"inserted": inserted, "deduplicated": deduplicated, "conflicts": conflicts}

    @staticmethod
    def _natural_key(patient_id, concept, eff_start, eff_end, source_record_id, group_key):
        return (patient_id, concept, eff_start,
                eff_end if eff_end is not None else -1,
                source_record_id, group_key or "")

    def _upsert_chunk(self, chunk: Sequence[AtomicFact]) -> tuple[int, int, list[AtomicFact]]:
        """Decide insert/dedup/supersede/conflict from a read-only prefetch,
        then flush in one short write transaction. Blocks never share source
        records, so cross-process races only occur on redelivery of the same
        block, where identical deterministic fact ids make INSERT OR IGNORE
        converge to the single-delivery state.
        """
        record_ids = sorted({f.source_record_id for f in chunk})
        existing: dict[tuple, sqlite3.Row] = {}
        for start in range(0, len(record_ids), 500):
            ids = record_ids[start:start + 500]
            placeholders = ",".join("?" * len(ids))
            for row in self.query(
                    f"SELECT * FROM facts WHERE superseded_seq IS NULL "
                    f"AND source_record_id IN ({placeholders})", ids):
                key = self._natural_key(row["patient_id"], row["concept"], row["eff_start"],
                                        row["eff_end"], row["source_record_id"],
                                        row["group_key"])
                existing[key] = row

        inserted = deduplicated = 0
        conflicts: list[AtomicFact] = []
        to_insert: list[AtomicFact] = []
        to_supersede: list[str] = []  # fact ids replaced by a newer version
        pending: dict[tuple, AtomicFact] = {}  # keys written earlier in this chunk
        for fact in chunk:
            key = self._natural_key(fact.patient_id, fact.concept, fact.effective_start,
                                    fact.effective_end, fact.source_record_id,
                                    fact.group_key)
            prior = pending.get(key)
            if prior is not None:
                if prior.translator_version == fact.translator_version:
                    if self._fact_values_equal(prior, fact):
                        deduplicated += 1
                    else:
                        conflicts.append(fact)
                elif fact.translator_version < prior.translator_version:
                    deduplicated += 1
                else:
                    to_supersede.append(prior.fact_id)
                    to_insert.append(fact)
                    pending[key] = fact
                    inserted += 1
                continue
            row = existing.get(key)
            if row is None:
                to_insert.append(fact)
                pending[key] = fact
                inserted += 1
            elif fact.translator_version == row["translator_version"]:
                if self._values_equal(row, fact):
                    deduplicated += 1
                else:
                    conflicts.append(fact)
            elif fact.translator_version < row["translator_version"]:
                # stale replay of a job translated before a reprocess
                deduplicated += 1
            else:
                # newer translation supersedes even when the value is unchanged:
                # provenance must name the version that actually produced it
                to_supersede.append(row["fact_id"])
                to_insert.append(fact)
                pending[key] = fact
                inserted += 1

        with self.transaction() as conn:
            seq0 = self.next_seq(max(len(to_insert), 1))
            if to_supersede:
                conn.executemany(
                    "UPDATE facts SET superseded_seq = ? WHERE fact_id = ? "
                    "AND superseded_seq IS NULL",
                    [(seq0, fact_id) for fact_id in to_supersede])
            rows = []
            for offset, fact in enumerate(to_insert):
                cols = _stored_value(fact)
                rows.append((fact.fact_id, fact.patient_id, fact.concept,
                             fact.value_kind.value, cols["value_num"], cols["value_bool"],
                             cols["value_text"], cols["value_ts"], cols["value_ref"],
                             fact.unit, fact.effective_start, fact.effective_end,
                             fact.source_record_id, fact.translator_id,
                             fact.translator_version, fact.group_key, seq0 + offset))
            if rows:
                conn.executemany(
                    "INSERT OR IGNORE INTO facts (fact_id, patient_id, concept, value_kind,"
                    " value_num, value_bool, value_text, value_ts, value_ref, unit,"
                    " eff_start, eff_end, source_record_id, translator_id,"
                    " translator_version, group_key, seq) VALUES "
                    "(?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)", rows)
        return inserted, deduplicated, conflicts

    @staticmethod
    def _fact_values_equal(a: AtomicFact, b: AtomicFact) -> bool:
        return (a.value_kind == b.value_kind and a.unit == b.unit
                and _stored_value(a) == _stored_value(b))

    def _active_fact_row(self, fact: AtomicFact) -> Optional[sqlite3.Row]:
        return self.one(
            "SELECT * FROM facts WHERE patient_id = ? AND concept = ? AND eff_start = ? "
            "AND COALESCE(eff_end, -1) = ? AND source_record_id = ? "
            "AND COALESCE(group_key, '') = ? AND superseded_seq IS NULL",
            (fact.patient_id, fact.concept, fact.effective_start,
             fact.effective_end if fact.effective_end is not None else -1,
             fact.source_record_id, fact.group_key or ""))

    @staticmethod
    def _values_equal(row: sqlite3.Row, fact: AtomicFact) -> bool:
        if row["value_kind"] != fact.value_kind.value or row["unit"] != fact.unit:
            return False
        stored = _stored_value(fact)
        return all(row[col] == stored[col] for col in _VALUE_COLUMNS.values())

    def supersede_translator_facts(self, source_record_ids: Sequence[str] | str,
                                   translator_id: str, below_version: int) -> int:
        """Tombstone these records' facts from translator versions older than
        ``below_version`` (reprocessing: old outputs are superseded, kept).
        """
        ids = [source_record_ids] if isinstance(source_record_ids, str) \
            else list(source_record_ids)
        total = 0
        with self.transaction() as conn:
            seq = self.next_seq()
            for start in range(0, len(ids), 500):
                chunk = ids[start:start + 500]
                placeholders = ",".join("?" * len(chunk))
                cur = conn.execute(
                    f"UPDATE facts SET superseded_seq = ? WHERE translator_id = ? "
                    f"AND translator_version < ? AND superseded_seq IS NULL "
                    f"AND source_record_id IN ({placeholders})",
                    (seq, translator_id, below_version, *chunk))
                total += cur.rowcount
        return total

    def supersede_record_facts(self, record_id: str) -> int:
        """Tombstone all active facts of a corrected record."""
        with self.transaction() as conn:
            seq = self.next_seq()
            cur = conn.execute(
                "UPDATE facts SET superseded_seq = ? WHERE source_record_id = ? "
                "AND superseded_seq IS NULL", (seq, record_id))
            return cur.rowcount

    def quarantine_fact(self, fact_id: str) -> None:
        with self.transaction() as conn:
            seq = self.next_seq()
            conn.execute(
                "UPDATE facts SET quarantined_seq = ? WHERE fact_id = ? AND quarantined_seq IS NULL",
                (seq, fact_id))

    def active_fact_filter(self, snapshot: Optional[WarehouseSnapshot] = None) -> tuple[str, dict]:
        """SQL predicate selecting facts visible at a snapshot (or now)."""
        if snapshot is None:
            return ("superseded_seq IS NULL AND quarantined_seq IS NULL", {})
        return (
            "seq <= :hwm AND (superseded_seq IS NULL OR superseded_seq > :hwm) "
            "AND (quarantined_seq IS NULL OR quarantined_seq > :hwm)",
            {"hwm": snapshot.fact_mark},
        )

    def facts_for_concept(self, concept: str, patients: Optional[Sequence[str]] = None,
                          snapshot: Optional[WarehouseSnapshot] = None) -> list[AtomicFact]:
        pred, params = self.active_fact_filter(snapshot)
        sql = f"SELECT * FROM facts WHERE concept = :concept AND {pred}"
        params = {**params, "concept": concept}
        if patients is not None:
            placeholders = ",".join(f":p{i}" for i in range(len(patients)))
            sql += f" AND patient_id IN ({placeholders})"
            params.update({f"p{i}": p for i, p in enumerate(patients)})
        sql += " ORDER BY patient_id, eff_start, fact_id"
        return [row_to_fact(r) for r in self.query(sql, params)]

    def iter_active_facts(self, snapshot: Optional[WarehouseSnapshot] = None):
        pred, params = self.active_fact_filter(snapshot)
        for row in self.connection().execute(f"SELECT * FROM facts WHERE {pred}", params):
            yield row_to_fact(row)

    def fact_count(self, active_only: bool = True) -> int:
        if active_only:
            pred, params = self.active_fact_filter()
            return int(self.one(f"SELECT COUNT(*) FROM facts WHERE {pred}", params)[0])
        return int(self.one("SELECT COUNT(*) FROM facts")[0])

    def patients(self, snapshot: Optional[WarehouseSnapshot] = None) -> list[str]:
        pred, params = self.active_fact_filter(snapshot)
        rows = self.query(f"SELECT DISTINCT patient_id FROM facts WHERE {pred} ORDER BY patient_id",
                          params)
        return [r[0] for r in rows]

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self) -> WarehouseSnapshot:
        """Consistent high-water marks; rows appended later are invisible to
        any reader pinned to this snapshot.
        """
        with self.transaction() as conn:
            marks = {}
            for table in ("source_records", "facts", "qa_rows"):
                row = conn.execute(f"SELECT COALESCE(MAX(seq), 0) FROM {table}").fetchone()
                marks[table] = int(row[0])
            snapshot_id = uuid.uuid4().hex[:16]
            conn.execute("INSERT INTO snapshots (snapshot_id, created_at, marks) VALUES (?,?,?)",
                         (snapshot_id, utc_now_ms(), json.dumps(marks, sort_keys=True)))
        return WarehouseSnapshot(snapshot_id, marks)

    def get_snapshot(self, snapshot_id: str) -> WarehouseSnapshot:
        row = self.one("SELECT * FROM snapshots WHERE snapshot_id = ?", (snapshot_id,))
        if row is None:
            raise NotFound(f"snapshot {snapshot_id}")
        return WarehouseSnapshot(snapshot_id, json.loads(row["marks"]))

    # -- integrity ----------------------------------------------------------------

    def state_hash(self) -> str:
        """Content hash of all active facts; stable across delivery schedules,
        worker counts, and wall-clock (volatile columns excluded).
        """
        pred, params = self.active_fact_filter()
        rows = self.query(
            f"SELECT patient_id, concept, value_kind, value_num, value_bool, value_text,"
            f" value_ts, value_ref, unit, eff_start, eff_end, source_record_id,"
            f" translator_id, translator_version, group_key "
            f"FROM facts WHERE {pred}", params)
        digest = hashlib.sha256()
        for row in sorted(tuple(str(v) for v in r) for r in rows):
            digest.update("\x1f".join(row).encode())
            digest.update(b"\x1e")
        return digest.hexdigest()

    def provenance_chain(self, fact_id: str) -> list[dict]:
        """Resolve a fact's lineage: the fact, the translator identity that
        produced it, and the source-record chain (corrections walk back to the
        record they superseded). Raises NotFound on a broken link; the chain
        always terminates at one or more source records.
        """
        row = self.one("SELECT * FROM facts WHERE fact_id = ?", (fact_id,))
        if row is None:
            raise NotFound(f"fact {fact_id}")
        chain: list[dict] = [
            {"kind": "fact", "id": fact_id},
            {"kind": "translator", "id": row["translator_id"],
             "version": row["translator_version"]},
        ]
        record_id = row["source_record_id"]
        seen: set[str] = set()
        while record_id:
            if record_id in seen:
                raise FactlineError(f"provenance cycle at record {record_id}")
            seen.add(record_id)
            record = self.get_record(record_id)
            chain.append({"kind": "source-record", "id": record_id,
                          "source_kind": record.source_kind.value})
            record_id = record.supersedes
        return chain

    def metric_increment(self, name: str, amount: int = 1) -> None:
        with self.transaction() as conn:
            conn.execute(
                "INSERT INTO metrics (name, value) VALUES (?,?) "
                "ON CONFLICT(name) DO UPDATE SET value = value + excluded.value",
                (name, amount))

    def metric(self, name: str) -> int:
        row = self.one("SELECT value FROM metrics WHERE name = ?", (name,))
        return int(row[0]) if row else 0
