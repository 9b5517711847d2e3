"""Quarantine, diagnostics, and human mitigation for questionable data.

Three entry pathways: ETL errors, random warehouse validation, and
user-requested dataset validation. Data under review produces no usable
warehouse facts until an expert signs off a correction; systematically
failing translators can be halted and may only resume after an upgrade.
"""

from __future__ import annotations

import hashlib
import json
import random
import uuid
from dataclasses import dataclass
from typing import Optional

from .audit import AuditLog
from .errors import (
    AlreadyMitigated,
    RefusedNeedsUpgrade,
    UnknownSource,
    UnknownTranslator,
)
from .model import SourceKind, SourceRecord, utc_now_ms, validate_fact
from .stores import Warehouse, row_to_fact

PATHWAYS = ("etl-error", "warehouse-validation", "dataset-validation")


@dataclass(frozen=True)
class QARow:
    qa_id: str
    pathway: str
    source_record_id: str
    fact_id: Optional[str]
    translator_id: Optional[str]
    translator_version: Optional[int]
    status_message: str
    state: str  # open | mitigated | dismissed
    opened_at: int
    corrected_payload: Optional[str] = None
    signer: Optional[str] = None
    signed_at: Optional[int] = None
    correction_record_id: Optional[str] = None


def _row(warehouse: Warehouse, qa_id: str) -> QARow:
    row = warehouse.one("SELECT * FROM qa_rows WHERE qa_id = ?", (qa_id,))
    if row is None:
        raise UnknownSource(f"QA row {qa_id}")
    return QARow(row["qa_id"], row["pathway"], row["source_record_id"], row["fact_id"],
                 row["translator_id"], row["translator_version"], row["status_message"],
                 row["state"], row["opened_at"], row["corrected_payload"], row["signer"],
                 row["signed_at"], row["correction_record_id"])


def open_qa(warehouse: Warehouse, pathway: str, source_record_id: str,
            translator_id: Optional[str] = None, translator_version: Optional[int] = None,
            status_message: str = "", fact_id: Optional[str] = None,
            qa_id: Optional[str] = None, audit: Optional[AuditLog] = None,
            actor: str = "system") -> str:
    """Quarantine one datum for review. Deterministic qa ids make redelivered
    ETL work open each diagnostic exactly once.
    """
    if pathway not in PATHWAYS:
        raise ValueError(f"unknown pathway {pathway!r}")
    if pathway != "dataset-validation" and not warehouse.record_exists(source_record_id):
        raise UnknownSource(source_record_id)
    qa_id = qa_id or uuid.uuid4().hex[:24]
    with warehouse.transaction() as conn:
        seq = warehouse.next_seq()
        cur = conn.execute(
            "INSERT OR IGNORE INTO qa_rows (qa_id, pathway, source_record_id, fact_id,"
            " translator_id, translator_version, status_message, state, opened_at, seq) "
            "VALUES (?,?,?,?,?,?,?,'open',?,?)",
            (qa_id, pathway, source_record_id, fact_id, translator_id, translator_version,
             status_message, utc_now_ms(), seq))
        created = cur.rowcount > 0
    if created:
        warehouse.metric_increment("qa.opened")
        warehouse.metric_increment(f"qa.opened.{pathway}")
        if audit is not None:
            audit.append(actor, "qa.open", qa_id, "allowed")
    return qa_id


def list_qa(warehouse: Warehouse, state: Optional[str] = None,
            pathway: Optional[str] = None, limit: int = 500) -> list[QARow]:
    sql = "SELECT qa_id FROM qa_rows WHERE 1=1"
    params: list = []
    if state:
        sql += " AND state = ?"
        params.append(state)
    if pathway:
        sql += " AND pathway = ?"
        params.append(pathway)
    sql += " ORDER BY opened_at, qa_id LIMIT ?"
    params.append(limit)
    return [_row(warehouse, r[0]) for r in warehouse.query(sql, params)]


def get_qa(warehouse: Warehouse, qa_id: str) -> QARow:
    return _row(warehouse, qa_id)


def correction_record_id(original_record_id: str, corrected_payload: str) -> str:
    material = f"src|manual-correction|{original_record_id}|{corrected_payload}"
    return hashlib.sha256(material.encode()).hexdigest()[:32]


def mitigate(warehouse: Warehouse, broker, qa_id: str, corrected_payload: str, signer: str,
             audit: Optional[AuditLog] = None) -> str:
    """Submit a signed correction: a manual-correction SourceRecord supersedes
    the original and is re-enqueued through the ETL path. Returns the new
    record id. Mitigation is serialized per QA row (compare-and-set on state).
    """
    from . import ingest

    qa = _row(warehouse, qa_id)
    original = warehouse.get_record(qa.source_record_id)
    record = SourceRecord(
        record_id=correction_record_id(original.record_id, corrected_payload),
        patient_id=original.patient_id,
        source_kind=SourceKind.MANUAL_CORRECTION,
        category=original.category,
        payload=corrected_payload,
        received_at=utc_now_ms(),
        batch_id=f"qa-{qa_id}",
        supersedes=original.record_id,
    )
    with warehouse.transaction() as conn:
        cur = conn.execute(
            "UPDATE qa_rows SET state = 'mitigated', corrected_payload = ?, signer = ?,"
            " signed_at = ?, correction_record_id = ? WHERE qa_id = ? AND state = 'open'",
            (corrected_payload, signer, utc_now_ms(), record.record_id, qa_id))
        if cur.rowcount == 0:
            raise AlreadyMitigated(qa_id)
    ingest.create_batch(warehouse, source="manual-correction", batch_id=record.batch_id)
    warehouse.insert_source_records([record], batch_id=record.batch_id,
                                    memberships=[(record.category, 0)])
    ingest.finish_staging(warehouse, record.batch_id, 1)
    ingest.split_request(warehouse, broker, record.batch_id)
    warehouse.metric_increment("qa.mitigated")
    if audit is not None:
        audit.append(signer, "qa.mitigate", qa_id, "allowed")
    return record.record_id


def dismiss(warehouse: Warehouse, qa_id: str, signer: str, reason: str = "",
            audit: Optional[AuditLog] = None) -> None:
    """Mark a QA row as not-an-error, with sign-off."""
    with warehouse.transaction() as conn:
        cur = conn.execute(
            "UPDATE qa_rows SET state = 'dismissed', signer = ?, signed_at = ?,"
            " status_message = status_message || ? WHERE qa_id = ? AND state = 'open'",
            (signer, utc_now_ms(), f" [dismissed: {reason}]" if reason else " [dismissed]",
             qa_id))
        if cur.rowcount == 0:
            raise AlreadyMitigated(qa_id)
    if audit is not None:
        audit.append(signer, "qa.dismiss", qa_id, "allowed")


# -- HALT control ---------------------------------------------------------------

def halt(warehouse: Warehouse, translator_id: str, signer: str, origin: str = "qa",
         audit: Optional[AuditLog] = None) -> None:
    """Stop all replicas of a translator; they observe the flag between jobs."""
    with warehouse.transaction() as conn:
        cur = conn.execute(
            "UPDATE translator_configs SET halt = 1, halt_origin = ?, halt_version = version "
            "WHERE translator_id = ?", (origin, translator_id))
        if cur.rowcount == 0:
            raise UnknownTranslator(translator_id)
    if audit is not None:
        audit.append(signer, "translator.halt", translator_id, "allowed")


def resume(warehouse: Warehouse, translator_id: str, signer: str,
           audit: Optional[AuditLog] = None) -> None:
    """Clear a halt. A QA-initiated halt refuses to resume until the
    translator's config version has been bumped past the halted one.
    """
    row = warehouse.one("SELECT * FROM translator_configs WHERE translator_id = ?",
                        (translator_id,))
    if row is None:
        raise UnknownTranslator(translator_id)
    if (row["halt"] and row["halt_origin"] == "qa"
            and row["version"] <= (row["halt_version"] or 0)):
        raise RefusedNeedsUpgrade(
            f"{translator_id} was halted by QA at version {row['halt_version']}; "
            "upgrade its configuration before resuming")
    with warehouse.transaction() as conn:
        conn.execute(
            "UPDATE translator_configs SET halt = 0, halt_origin = NULL, halt_version = NULL "
            "WHERE translator_id = ?", (translator_id,))
    if audit is not None:
        audit.append(signer, "translator.resume", translator_id, "allowed")


# -- random warehouse validation ---------------------------------------------------

def sample_warehouse(warehouse: Warehouse, registry, fraction: float = 0.001,
                     seed: Optional[int] = None, audit: Optional[AuditLog] = None) -> dict:
    """Validate a random sample of active facts; violations are quarantined
    and opened as warehouse-validation QA rows.
    """
    rng = random.Random(seed)
    ids = [r[0] for r in warehouse.query(
        "SELECT fact_id FROM facts WHERE superseded_seq IS NULL AND quarantined_seq IS NULL")]
    k = max(1, int(len(ids) * fraction)) if ids else 0
    sampled = rng.sample(ids, k) if k else []
    flagged = []
    for fact_id in sampled:
        fact = row_to_fact(warehouse.one("SELECT * FROM facts WHERE fact_id = ?", (fact_id,)))
        report = validate_fact(fact, registry, record_exists=warehouse.record_exists)
        if report:
            warehouse.quarantine_fact(fact_id)
            qa_id = open_qa(
                warehouse, "warehouse-validation", fact.source_record_id,
                translator_id=fact.translator_id, translator_version=fact.translator_version,
                status_message="; ".join(f"{v.invariant}: {v.message}" for v in report),
                fact_id=fact_id, qa_id=f"wv-{fact_id[:24]}", audit=audit)
            flagged.append(qa_id)
    return {"sampled": len(sampled), "flagged": flagged}
