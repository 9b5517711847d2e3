"""Translation framework: stateless translator workers turn one source row
into a list of atomic facts, driven by JSON-configured knowledge.

Bad data never throws and never poisons the queue: anything unparseable or
clinically absurd becomes a QA flag routed to quarantine. Translation is a
pure function of (row payload, config version), so any replica count and any
redelivery schedule produce the same warehouse.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional

from . import compounds, qaqc
from .audit import AuditLog
from .broker import Broker, JobEnvelope
from .errors import NoNewerVersion, UnknownTranslator, UnrecognizedValue
from .model import (
    AtomicFact,
    ConceptRegistry,
    SourceRecord,
    ValueKind,
    canonicalize_boolean,
    make_fact_id,
    parse_ts,
)
from .stores import Warehouse


@dataclass(frozen=True)
class TranslatorConfig:
    """Identity plus the medically-relevant knowledge driving one translator.
    The version increments on every knowledge change; halted translators
    consume no jobs until resumed.
    """

    translator_id: str
    version: int
    category: str
    knowledge: dict = field(default_factory=dict)
    halt: bool = False


@dataclass(frozen=True)
class QAFlag:
    reason: str  # unparseable | out-of-range
    detail: str
    withheld: bool = True  # False: facts stored anyway, flagged for review


@dataclass(frozen=True)
class RowResult:
    facts: tuple[AtomicFact, ...] = ()
    flags: tuple[QAFlag, ...] = ()


def _flag(reason: str, detail: str) -> RowResult:
    return RowResult(flags=(QAFlag(reason, detail),))


# -- config registry (backed by the warehouse so every process sees updates) ----

def save_translator_config(warehouse: Warehouse, config: TranslatorConfig) -> None:
    with warehouse.transaction() as conn:
        conn.execute(
            "INSERT INTO translator_configs (translator_id, version, category, knowledge, halt)"
            " VALUES (?,?,?,?,?) ON CONFLICT(translator_id) DO UPDATE SET"
            " version = excluded.version, category = excluded.category,"
            " knowledge = excluded.knowledge",
            (config.translator_id, config.version, config.category,
             json.dumps(config.knowledge, sort_keys=True), int(config.halt)))


def load_translator_config(warehouse: Warehouse, translator_id: str) -> TranslatorConfig:
    row = warehouse.one("SELECT * FROM translator_configs WHERE translator_id = ?",
                        (translator_id,))
    if row is None:
        raise UnknownTranslator(translator_id)
    return TranslatorConfig(row["translator_id"], row["version"], row["category"],
                            json.loads(row["knowledge"]), bool(row["halt"]))


def bump_translator_version(warehouse: Warehouse, translator_id: str,
                            knowledge: Optional[dict] = None) -> TranslatorConfig:
    """Apply a knowledge change: version increments, workers hot-reload."""
    config = load_translator_config(warehouse, translator_id)
    updated = TranslatorConfig(
        translator_id=config.translator_id, version=config.version + 1,
        category=config.category,
        knowledge=knowledge if knowledge is not None else config.knowledge,
        halt=config.halt)
    save_translator_config(warehouse, updated)
    return updated


def translator_for_category(warehouse: Warehouse, category: str) -> TranslatorConfig:
    row = warehouse.one("SELECT translator_id FROM translator_configs WHERE category = ?",
                        (category,))
    if row is None:
        raise UnknownTranslator(f"no translator for category {category!r}")
    return load_translator_config(warehouse, row[0])


def list_translators(warehouse: Warehouse) -> list[TranslatorConfig]:
    rows = warehouse.query("SELECT translator_id FROM translator_configs ORDER BY translator_id")
    return [load_translator_config(warehouse, r[0]) for r in rows]


# -- row translators -------------------------------------------------------------

def _translate_vitals(record: SourceRecord, config: TranslatorConfig,
                      registry: ConceptRegistry) -> RowResult:
    fields = record.payload.split("|")
    if len(fields) != 4:
        return _flag("unparseable", f"expected name|value|unit|time, got {record.payload!r}")
    name, raw_value, unit, raw_ts = fields
    if name not in registry or registry.get(name).value_kind is not ValueKind.NUMBER:
        return _flag("unparseable", f"unknown vital {name!r}")
    conversions = config.knowledge["unit_conversions"]
    if unit not in conversions:
        return _flag("unparseable", f"unknown unit {unit!r} for {name}")
    try:
        source_value = float(raw_value)
        ts = parse_ts(raw_ts)
    except ValueError:
        return _flag("unparseable", f"bad value or timestamp in {record.payload!r}")

    conv = conversions[unit]
    cdef = registry.get(name)
    if conv["target"] != cdef.unit:
        return _flag("unparseable",
                     f"unit {unit!r} converts to {conv['target']!r}, not {cdef.unit!r}")
    value = source_value * conv["scale"] + conv["offset"]

    fact = AtomicFact(
        fact_id=make_fact_id(record.patient_id, name, ts, record.record_id, None, config.version),
        patient_id=record.patient_id, concept=name, value_kind=ValueKind.NUMBER,
        value=value, unit=cdef.unit, effective_time=ts, source_record_id=record.record_id,
        translator_id=config.translator_id, translator_version=config.version)

    lo, hi = cdef.expected_range if cdef.expected_range else (None, None)
    if lo is None:
        return RowResult(facts=(fact,))
    withhold = config.knowledge.get("withhold_factor", 2.0)
    if value < lo / withhold or value > hi * withhold:
        return _flag("out-of-range",
                     f"{name} = {value:g} {cdef.unit} is far outside [{lo}, {hi}]; withheld")
    if value < lo or value > hi:
        # moderate deviation: stored, but flagged for review
        return RowResult(facts=(fact,), flags=(QAFlag(
            "out-of-range", f"{name} = {value:g} {cdef.unit} outside [{lo}, {hi}]",
            withheld=False),))
    return RowResult(facts=(fact,))


def _translate_labs(record: SourceRecord, config: TranslatorConfig,
                    registry: ConceptRegistry) -> RowResult:
    fields = record.payload.split("|")
    if len(fields) != 3:
        return _flag("unparseable", f"expected test|result|time, got {record.payload!r}")
    test, raw_result, raw_ts = fields
    if test not in registry:
        return _flag("unparseable", f"unknown test {test!r}")
    try:
        ts = parse_ts(raw_ts)
    except ValueError:
        return _flag("unparseable", f"bad timestamp in {record.payload!r}")

    cdef = registry.get(test)
    if cdef.value_kind is ValueKind.BOOLEAN:
        try:
            value = canonicalize_boolean(raw_result, cdef)
        except UnrecognizedValue:
            return _flag("unparseable", f"unrecognized result {raw_result!r} for {test}")
    elif cdef.value_kind is ValueKind.TEXT_CHOICE:
        matches = [c for c in cdef.choices if c.lower() == raw_result.strip().lower()]
        if not matches:
            return _flag("unparseable", f"{raw_result!r} is not a choice for {test}")
        value = matches[0]
    else:
        return _flag("unparseable", f"{test} is not a categorical or boolean concept")

    fact = AtomicFact(
        fact_id=make_fact_id(record.patient_id, test, ts, record.record_id, None, config.version),
        patient_id=record.patient_id, concept=test, value_kind=cdef.value_kind,
        value=value, unit=None, effective_time=ts, source_record_id=record.record_id,
        translator_id=config.translator_id, translator_version=config.version)
    return RowResult(facts=(fact,))


def _translate_diagnoses(record: SourceRecord, config: TranslatorConfig,
                         registry: ConceptRegistry) -> RowResult:
    fields = record.payload.split("|")
    if len(fields) != 3:
        return _flag("unparseable", f"expected code|description|time, got {record.payload!r}")
    code, _description, raw_ts = fields
    pattern = config.knowledge.get("code_pattern", r"^[A-Z][0-9][0-9A-Z](?:\.[0-9A-Z]{1,4})?$")
    if not re.match(pattern, code.strip()):
        return _flag("unparseable", f"{code!r} is not a valid diagnosis code")
    code = code.strip()
    concept = "diagnosis.icd10"
    if code not in registry.get(concept).choices:
        return _flag("unparseable", f"{code!r} is not in the configured code list")
    try:
        ts = parse_ts(raw_ts)
    except ValueError:
        return _flag("unparseable", f"bad timestamp in {record.payload!r}")
    fact = AtomicFact(
        fact_id=make_fact_id(record.patient_id, concept, ts, record.record_id, None,
                             config.version),
        patient_id=record.patient_id, concept=concept, value_kind=ValueKind.TEXT_CHOICE,
        value=code, unit=None, effective_time=ts, source_record_id=record.record_id,
        translator_id=config.translator_id, translator_version=config.version)
    return RowResult(facts=(fact,))


def _translate_medications(record: SourceRecord, config: TranslatorConfig,
                           registry: ConceptRegistry) -> RowResult:
    head, sep, raw_ts = record.payload.rpartition("|")
    if not sep:
        return _flag("unparseable", f"missing timestamp in {record.payload!r}")
    try:
        ts = parse_ts(raw_ts)
    except ValueError:
        return _flag("unparseable", f"bad timestamp in {record.payload!r}")
    try:
        compound = compounds.parse(
            head,
            known_ingredients=set(config.knowledge.get("ingredients", ())) or None,
            known_forms=set(config.knowledge.get("forms", ())) or None)
    except compounds.CompoundParseError as exc:
        return _flag("unparseable", str(exc))

    # one compound per row; decomposed entries stay linked through a group key
    group_key = f"{record.record_id}/g0"
    facts = []
    for ingredient in compound.sorted_by_name().ingredients:
        concept = f"medication.{ingredient.name}"
        facts.append(AtomicFact(
            fact_id=make_fact_id(record.patient_id, concept, ts, record.record_id,
                                 group_key, config.version),
            patient_id=record.patient_id, concept=concept, value_kind=ValueKind.NUMBER,
            value=ingredient.dose_mg, unit="mg", effective_time=ts,
            source_record_id=record.record_id, translator_id=config.translator_id,
            translator_version=config.version, group_key=group_key))
    facts.append(AtomicFact(
        fact_id=make_fact_id(record.patient_id, "medication.form", ts, record.record_id,
                             group_key, config.version),
        patient_id=record.patient_id, concept="medication.form",
        value_kind=ValueKind.TEXT_CHOICE, value=compound.form, unit=None, effective_time=ts,
        source_record_id=record.record_id, translator_id=config.translator_id,
        translator_version=config.version, group_key=group_key))
    return RowResult(facts=tuple(facts))


def _translate_encounters(record: SourceRecord, config: TranslatorConfig,
                          registry: ConceptRegistry) -> RowResult:
    fields = record.payload.split("|")
    if len(fields) != 2:
        return _flag("unparseable", f"expected event|time, got {record.payload!r}")
    event, raw_ts = fields
    if event not in config.knowledge.get("events", ()):
        return _flag("unparseable", f"unknown encounter event {event!r}")
    try:
        ts = parse_ts(raw_ts)
    except ValueError:
        return _flag("unparseable", f"bad timestamp in {record.payload!r}")
    concept = f"encounter.{event}"
    fact = AtomicFact(
        fact_id=make_fact_id(record.patient_id, concept, ts, record.record_id, None,
                             config.version),
        patient_id=record.patient_id, concept=concept, value_kind=ValueKind.TIMESTAMP,
        value=ts, unit=None, effective_time=ts, source_record_id=record.record_id,
        translator_id=config.translator_id, translator_version=config.version)
    return RowResult(facts=(fact,))


def _translate_waveforms(record: SourceRecord, config: TranslatorConfig,
                         registry: ConceptRegistry) -> RowResult:
    fields = record.payload.split("|")
    if len(fields) != 5:
        return _flag("unparseable", f"expected kind|hz|samples|key|time, got {record.payload!r}")
    kind, raw_hz, raw_n, key, raw_ts = fields
    if kind not in config.knowledge.get("kinds", ()):
        return _flag("unparseable", f"unknown waveform kind {kind!r}")
    try:
        hz, n = int(raw_hz), int(raw_n)
        start = parse_ts(raw_ts)
    except ValueError:
        return _flag("unparseable", f"bad numeric field in {record.payload!r}")
    duration_ms = int(n * 1000 / hz)
    concept = f"waveform.{kind}"
    eff = (start, start + duration_ms)
    fact = AtomicFact(
        fact_id=make_fact_id(record.patient_id, concept, eff, record.record_id, None,
                             config.version),
        patient_id=record.patient_id, concept=concept, value_kind=ValueKind.SERIES_REF,
        value=f"waveforms/{key}", unit=None, effective_time=eff,
        source_record_id=record.record_id, translator_id=config.translator_id,
        translator_version=config.version)
    return RowResult(facts=(fact,))


_CATEGORY_TRANSLATORS = {
    "vitals": _translate_vitals,
    "labs": _translate_labs,
    "diagnoses": _translate_diagnoses,
    "medications": _translate_medications,
    "encounters": _translate_encounters,
    "waveforms": _translate_waveforms,
}


def translate_row(record: SourceRecord, config: TranslatorConfig,
                  registry: ConceptRegistry) -> RowResult:
    """Translate one source row into atomic facts, or QA flags for anything
    that cannot be interpreted. Never raises on bad data; deterministic for a
    fixed (row payload, config version).
    """
    if record.category != config.category:
        return _flag("unparseable",
                     f"row category {record.category!r} does not match translator "
                     f"{config.translator_id!r}")
    translator = _CATEGORY_TRANSLATORS.get(config.category)
    if translator is None:
        return _flag("unparseable", f"no translation logic for category {config.category!r}")
    return translator(record, config, registry)


# -- block processing / worker loop ------------------------------------------------

def qa_flag_id(record_id: str, translator_id: str, version: int, index: int) -> str:
    material = f"qaflag|{record_id}|{translator_id}|{version}|{index}"
    return hashlib.sha256(material.encode()).hexdigest()[:24]


def process_block(body: dict, warehouse: Warehouse, registry: ConceptRegistry,
                  audit: Optional[AuditLog] = None) -> dict:
    """Handle one translate-block job: load the block's rows, translate each,
    upsert facts, open QA rows for flags, and mark the block done. Every step
    is idempotent, so redelivery and crashes cannot corrupt the warehouse.
    """
    config = load_translator_config(warehouse, body["translator_id"])
    records = warehouse.records_for_block(
        body["batch_id"], body["category"], body["start"], body["end"])

    facts: list[AtomicFact] = []
    flagged: list[tuple[SourceRecord, int, QAFlag]] = []
    corrections: list[SourceRecord] = []
    sweep: list[str] = []
    for record in records:
        result = translate_row(record, config, registry)
        facts.extend(result.facts)
        for index, flag in enumerate(result.flags):
            flagged.append((record, index, flag))
        if record.supersedes and not result.flags:
            corrections.append(record)
        sweep.append(record.record_id)

    def _conflict_to_qa(fact: AtomicFact, existing: Optional[AtomicFact]) -> None:
        qa_id = hashlib.sha256(
            f"qaconflict|{fact.fact_id}".encode()).hexdigest()[:24]
        qaqc.open_qa(
            warehouse, "etl-error", fact.source_record_id,
            translator_id=config.translator_id, translator_version=config.version,
            status_message=(f"conflict: {fact.concept} already stored as "
                            f"{existing.value!r}, re-derived as {fact.value!r}"),
            qa_id=qa_id, audit=audit)

    known_records = {r.record_id for r in records}
    counts = warehouse.upsert_facts(facts, registry, raise_on_conflict=False,
                                    on_conflict=_conflict_to_qa,
                                    record_exists=known_records.__contains__)
    for record, index, flag in flagged:
        qaqc.open_qa(
            warehouse, "etl-error", record.record_id,
            translator_id=config.translator_id, translator_version=config.version,
            status_message=f"{flag.reason}: {flag.detail}",
            qa_id=qa_flag_id(record.record_id, config.translator_id, config.version, index),
            audit=audit)
    warehouse.supersede_translator_facts(sweep, config.translator_id, config.version)
    for record in corrections:
        warehouse.supersede_record_facts(record.supersedes)

    warehouse.execute("UPDATE blocks SET done = 1 WHERE batch_id = ? AND block_idx = ?",
                      (body["batch_id"], body.get("block_idx", -1)))
    return {"rows": len(records), "facts": len(facts),
            "inserted": counts["inserted"], "deduplicated": counts["deduplicated"],
            "qa_flags": len(flagged)}


def reprocess(warehouse: Warehouse, broker: Broker, translator_id: str, from_version: int,
              block_size: int = 500) -> str:
    """Re-enqueue every source record previously translated by versions older
    than ``from_version``; their old facts are superseded once new ones land.
    """
    from . import ingest  # batch/block machinery lives with the controllers

    config = load_translator_config(warehouse, translator_id)
    if config.version < from_version:
        raise NoNewerVersion(
            f"{translator_id} is at version {config.version}; cannot reprocess to "
            f"{from_version}")
    rows = warehouse.query(
        "SELECT DISTINCT source_record_id FROM facts WHERE translator_id = ? "
        "AND translator_version < ? "
        "UNION SELECT DISTINCT source_record_id FROM qa_rows WHERE translator_id = ? "
        "AND translator_version < ? AND pathway = 'etl-error'",
        (translator_id, from_version, translator_id, from_version))
    record_ids = sorted(r[0] for r in rows)

    batch_id = f"reprocess-{translator_id}-v{from_version}"
    ingest.create_batch(warehouse, source=f"reprocess:{translator_id}", batch_id=batch_id)
    records = [warehouse.get_record(record_id) for record_id in record_ids]
    per_category: dict[str, int] = {}
    memberships = []
    for rec in records:
        n = per_category.get(rec.category, 0)
        memberships.append((rec.category, n))
        per_category[rec.category] = n + 1
    warehouse.insert_source_records(records, batch_id=batch_id, memberships=memberships)
    ingest.finish_staging(warehouse, batch_id, staged_rows=len(records))
    ingest.split_request(warehouse, broker, batch_id, block_size=block_size)
    return batch_id
