"""Source and upload controllers: receive raw data, stage it before any
interpretation, split it into blocks, and fan translate jobs out per category.

Receiving is decoupled from parsing: pages land verbatim in the blob store and
the source-record table first; translate-block jobs only reference row ranges.
Record ids are content-derived, so re-pulling a corpus or redelivering a
staging step never duplicates anything.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import uuid
from typing import Optional, Sequence

from .broker import Broker
from .errors import (
    BatchNotStaged,
    NotFound,
    SchemaMismatch,
    UnknownSource,
    UnsupportedFormat,
)
from .model import SourceKind, SourceRecord, utc_now_ms
from .stores import BlobStore, Warehouse

DEFAULT_BLOCK_SIZE = 500  # rows per translate job; processes well inside a lease
STAGING_BUCKET = "staging"
WAVEFORM_BUCKET = "waveforms"
UPLOAD_BUCKET = "uploads"


def record_id_for(source_kind: str, scope: str, idx, payload: str) -> str:
    material = f"src|{source_kind}|{scope}|{idx}|{payload}"
    return hashlib.sha256(material.encode()).hexdigest()[:32]


def etl_queue(category: str) -> str:
    return f"etl.{category}"


def block_job_id(batch_id: str, category: str, start: int, end: int) -> str:
    return hashlib.sha256(f"block|{batch_id}|{category}|{start}|{end}".encode()).hexdigest()[:32]


def create_batch(warehouse: Warehouse, source: str, project_id: Optional[str] = None,
                 batch_id: Optional[str] = None, extra: Optional[dict] = None) -> str:
    batch_id = batch_id or uuid.uuid4().hex[:16]
    with warehouse.transaction() as conn:
        conn.execute(
            "INSERT OR IGNORE INTO batches (batch_id, source, project_id, created_at, state,"
            " extra) VALUES (?,?,?,?, 'staging', ?)",
            (batch_id, source, project_id, utc_now_ms(),
             json.dumps(extra or {}, sort_keys=True)))
    return batch_id


def finish_staging(warehouse: Warehouse, batch_id: str, staged_rows: int) -> None:
    with warehouse.transaction() as conn:
        conn.execute("UPDATE batches SET state = 'staged', staged_rows = ? WHERE batch_id = ?",
                     (staged_rows, batch_id))


def start_pull(warehouse: Warehouse, blobs: BlobStore, sources: dict,
               source_id: str, patient_ids: Sequence[str],
               categories: Optional[Sequence[str]] = None,
               project_id: Optional[str] = None, page_size: int = DEFAULT_BLOCK_SIZE,
               batch_id: Optional[str] = None) -> str:
    """Query a registered source and stage everything it returns: one blob per
    raw page, one source-record row per datum, waveform attachments to their
    own keys. No parsing happens here.
    """
    if source_id not in sources:
        raise UnknownSource(source_id)
    source = sources[source_id]
    batch_id = create_batch(warehouse, source=source_id, project_id=project_id,
                            batch_id=batch_id, extra={"patients": len(patient_ids)})

    counters: dict[str, int] = {}
    staged = 0
    now = utc_now_ms()
    for page_no, rows in enumerate(source.iter_rows(patient_ids, categories, page_size)):
        page_lines = []
        records, memberships = [], []
        for row in rows:
            payload = row["payload"]
            page_lines.append(json.dumps(
                {k: row[k] for k in ("patient_id", "category", "idx", "payload")},
                sort_keys=True))
            attachment = row.get("attachment_b64")
            if attachment is not None:
                # the payload names its own storage key (device-wrapper style)
                key = payload.split("|")[3]
                blobs.put(WAVEFORM_BUCKET, key, base64.b64decode(attachment), if_absent=True)
            records.append(SourceRecord(
                record_id=record_id_for(SourceKind.SYNTHETIC_EHR.value, row["patient_id"],
                                        row["idx"], payload),
                patient_id=row["patient_id"], source_kind=SourceKind.SYNTHETIC_EHR,
                category=row["category"], payload=payload, received_at=now,
                batch_id=batch_id))
            cat = row["category"]
            memberships.append((cat, counters.get(cat, 0)))
            counters[cat] = counters.get(cat, 0) + 1
        blobs.put(STAGING_BUCKET, f"batches/{batch_id}/pages/{page_no:06d}.jsonl",
                  ("\n".join(page_lines) + "\n").encode(), if_absent=True)
        warehouse.insert_source_records(records, batch_id=batch_id, memberships=memberships)
        staged += len(records)

    finish_staging(warehouse, batch_id, staged)
    return batch_id


def split_request(warehouse: Warehouse, broker: Broker, batch_id: str,
                  block_size: int = DEFAULT_BLOCK_SIZE) -> list[str]:
    """Partition a staged batch into per-category blocks and publish one
    translate job per block. Deterministic job ids make re-splitting a no-op:
    every staged row is covered by exactly one block.
    """
    from . import etl  # translator lookup; etl pulls batch helpers from here

    batch = warehouse.one("SELECT * FROM batches WHERE batch_id = ?", (batch_id,))
    if batch is None or batch["state"] == "staging":
        raise BatchNotStaged(batch_id)

    job_ids = []
    block_idx = 0
    counts = warehouse.batch_category_counts(batch_id)
    for category in sorted(counts):
        translator = etl.translator_for_category(warehouse, category)
        queue = etl_queue(category)
        total = counts[category]
        for start in range(0, total, block_size):
            end = min(start + block_size, total)
            job_id = block_job_id(batch_id, category, start, end)
            with warehouse.transaction() as conn:
                conn.execute(
                    "INSERT OR IGNORE INTO blocks (batch_id, block_idx, category, start_seq,"
                    " end_seq, job_id) VALUES (?,?,?,?,?,?)",
                    (batch_id, block_idx, category, start, end, job_id))
            broker.publish(queue, "translate-block", {
                "batch_id": batch_id, "block_idx": block_idx, "category": category,
                "start": start, "end": end, "translator_id": translator.translator_id,
            }, job_id=job_id)
            job_ids.append(job_id)
            block_idx += 1

    with warehouse.transaction() as conn:
        conn.execute("UPDATE batches SET total_blocks = ?, state = 'processing' "
                     "WHERE batch_id = ?", (len(job_ids), batch_id))
    return job_ids


def register_upload(warehouse: Warehouse, blobs: BlobStore, broker: Broker,
                    file_bytes: bytes, declared_kind: str,
                    project_id: Optional[str] = None, filename: str = "upload",
                    auto_split: bool = True,
                    block_size: int = DEFAULT_BLOCK_SIZE) -> str:
    """Accept an external file (CSV with header, or JSON lines), stage its rows
    as file-upload source records, and fan out the usual translate path.
    """
    if declared_kind not in ("csv", "jsonl"):
        raise UnsupportedFormat(declared_kind)
    try:
        text = file_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise UnsupportedFormat(f"not UTF-8: {exc}") from None

    required = {"patient_id", "category", "payload"}
    rows: list[dict] = []
    if declared_kind == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if text.strip():
            missing = required - set(reader.fieldnames or ())
            if missing:
                raise SchemaMismatch(f"missing column(s): {', '.join(sorted(missing))}")
            rows = list(reader)
    else:
        for line_no, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UnsupportedFormat(f"line {line_no + 1}: {exc}") from None
            missing = required - set(obj)
            if missing:
                raise SchemaMismatch(
                    f"line {line_no + 1} missing key(s): {', '.join(sorted(missing))}")
            rows.append(obj)

    known = {r[0] for r in warehouse.query("SELECT category FROM translator_configs")}
    strange = sorted({r["category"] for r in rows} - known)
    if strange:
        raise SchemaMismatch(f"no translator for category(ies): {', '.join(strange)}")

    digest = hashlib.sha256(file_bytes).hexdigest()[:16]
    batch_id = create_batch(warehouse, source="file-upload", project_id=project_id,
                            extra={"filename": filename, "digest": digest})
    blobs.put(UPLOAD_BUCKET, f"{batch_id}/{filename}.{declared_kind}", file_bytes,
              if_absent=True)

    now = utc_now_ms()
    counters: dict[str, int] = {}
    records, memberships = [], []
    for i, row in enumerate(rows):
        payload = row["payload"]
        records.append(SourceRecord(
            record_id=record_id_for(SourceKind.FILE_UPLOAD.value, digest, i, payload),
            patient_id=row["patient_id"], source_kind=SourceKind.FILE_UPLOAD,
            category=row["category"], payload=payload, received_at=now, batch_id=batch_id))
        cat = row["category"]
        memberships.append((cat, counters.get(cat, 0)))
        counters[cat] = counters.get(cat, 0) + 1
    warehouse.insert_source_records(records, batch_id=batch_id, memberships=memberships)
    finish_staging(warehouse, batch_id, len(records))

    if auto_split:
        split_request(warehouse, broker, batch_id, block_size=block_size)
    return batch_id


PULL_QUEUE = "pulls"


def request_pull(warehouse: Warehouse, broker: Broker, source_spec: dict,
                 patient_ids: Sequence[str], categories: Optional[Sequence[str]] = None,
                 project_id: Optional[str] = None, patients_per_shard: int = 25,
                 block_size: int = DEFAULT_BLOCK_SIZE) -> list[str]:
    """Coordinator half of a distributed pull: split the request into
    patient shards and publish one pull job per shard; workers acquire,
    stage, and fan out the blocks. ``source_spec`` must let a worker rebuild
    the source: {source_id, profile, master_seed, patient_count, malformed_fraction}.
    """
    job_ids = []
    for start in range(0, len(patient_ids), patients_per_shard):
        shard = list(patient_ids[start:start + patients_per_shard])
        material = json.dumps({"spec": source_spec, "patients": shard,
                               "categories": categories}, sort_keys=True)
        job_id = hashlib.sha256(f"pullshard|{material}".encode()).hexdigest()[:32]
        broker.publish(PULL_QUEUE, "pull-shard", {
            "source_spec": source_spec, "patient_ids": shard,
            "categories": categories, "project_id": project_id,
            "batch_id": f"pull-{job_id[:16]}", "block_size": block_size,
        }, job_id=job_id)
        job_ids.append(job_id)
    return job_ids


def handle_pull_shard(body: dict, warehouse: Warehouse, blobs: BlobStore, broker: Broker,
                      source_cache: dict) -> None:
    """Worker half of a distributed pull: rebuild the synthetic source from its
    spec, stage the shard's rows, and publish translate blocks. Deterministic
    batch and job ids keep redelivery harmless.
    """
    from .synth import SyntheticSource, load_profiles

    spec = body["source_spec"]
    cache_key = json.dumps(spec, sort_keys=True)
    if cache_key not in source_cache:
        source_cache[cache_key] = SyntheticSource(
            load_profiles(spec.get("profile", "desk")), spec["master_seed"],
            spec["patient_count"], malformed_fraction=spec.get("malformed_fraction"))
    source = source_cache[cache_key]
    source.reserve_cache(len(body["patient_ids"]))
    sources = {spec["source_id"]: source}
    try:
        batch_id = start_pull(warehouse, blobs, sources, spec["source_id"],
                              body["patient_ids"], body.get("categories"),
                              project_id=body.get("project_id"),
                              page_size=body.get("block_size", DEFAULT_BLOCK_SIZE),
                              batch_id=body["batch_id"])
    finally:
        # workers stay constant-memory regardless of corpus size
        source.trim_cache()
    split_request(warehouse, broker, batch_id,
                  block_size=body.get("block_size", DEFAULT_BLOCK_SIZE))


def batch_status(warehouse: Warehouse, broker: Broker, batch_id: str) -> dict:
    batch = warehouse.one("SELECT * FROM batches WHERE batch_id = ?", (batch_id,))
    if batch is None:
        raise NotFound(f"batch {batch_id}")
    done = warehouse.one(
        "SELECT COUNT(*) FROM blocks WHERE batch_id = ? AND done = 1", (batch_id,))[0]
    total = batch["total_blocks"]

    dead = 0
    for queue in broker.queues():
        if not queue.startswith("etl."):
            continue
        dead += sum(1 for job in broker.dead_letter_jobs(queue)
                    if job.body.get("batch_id") == batch_id)

    if dead:
        status = "partial-failed"
    elif batch["state"] in ("staging", "staged"):
        status = "staged"
    elif total and done >= total:
        status = "complete"
    else:
        status = "processing"
    return {
        "batch_id": batch_id, "status": status, "source": batch["source"],
        "project_id": batch["project_id"], "staged_rows": batch["staged_rows"],
        "total_blocks": total, "done_blocks": done, "dead_blocks": dead,
    }
