"""Dataset creation engine: evaluate researcher-defined variables over the
warehouse and emit version-controlled human-readable and numeric datasets.

A variable is (data source, operation, value, timeframe, constraints, mapping
scheme). Warehouse-heavy variables fan out as independent jobs over the
broker (one per variable per patient shard); a deterministic join step
computes derived variables, applies constraints, and writes both files, so
one worker or fifty produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import uuid
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional, Sequence

import numpy as np

from .broker import Broker
from .errors import (
    CyclicConstraint,
    NotFound,
    UnknownConcept,
    UnknownOperation,
    ValidationFailed,
)
from .model import (
    ConceptRegistry,
    MappingScheme,
    SchemeOrigin,
    ValueKind,
    render_ts,
    render_value,
    utc_now_ms,
)
from .stores import BlobStore, Warehouse, WarehouseSnapshot

DATASET_BUCKET = "datasets"
DATASET_QUEUE = "datasets"
ANALYSIS_QUEUE = "analysis"
DEFAULT_SHARD_SIZE = 10_000
MISSING = ""  # sentinel for missing cells in both files
LIST_SEPARATOR = ";"


@dataclass(frozen=True)
class TimeframeSpec:
    kind: str = "always"  # always | absolute-range | anchor-relative
    range: Optional[tuple[int, int]] = None  # [start, end) epoch ms
    anchor: Optional[tuple[str, int, int]] = None  # (concept, before_ms, after_ms)

    def __post_init__(self):
        if self.kind == "absolute-range" and self.range is None:
            raise ValueError("absolute-range timeframe requires a range")
        if self.kind == "anchor-relative" and self.anchor is None:
            raise ValueError("anchor-relative timeframe requires an anchor")

    @staticmethod
    def from_json(doc: Optional[dict]) -> "TimeframeSpec":
        if not doc or doc.get("kind", "always") == "always":
            return TimeframeSpec()
        if doc["kind"] == "absolute-range":
            start, end = doc["range"]
            return TimeframeSpec("absolute-range", range=(int(start), int(end)))
        if doc["kind"] == "anchor-relative":
            a = doc["anchor"]
            return TimeframeSpec("anchor-relative",
                                 anchor=(a["concept"], int(a["before_ms"]), int(a["after_ms"])))
        raise ValueError(f"unknown timeframe kind {doc['kind']!r}")

    def to_json(self) -> dict:
        if self.kind == "absolute-range":
            return {"kind": self.kind, "range": list(self.range)}
        if self.kind == "anchor-relative":
            concept, before, after = self.anchor
            return {"kind": self.kind,
                    "anchor": {"concept": concept, "before_ms": before, "after_ms": after}}
        return {"kind": "always"}


@dataclass(frozen=True)
class VariableDef:
    """One column specification of a dataset."""

    name: str
    data_source: dict  # {"concept": c} | {"table": t, "field": f} | {"variables": [...]}
    operation: str
    value: Any = None
    timeframe: TimeframeSpec = field(default_factory=TimeframeSpec)
    constraints: tuple[str, ...] = ()
    mapping: dict = field(default_factory=lambda: {"policy": "default"})

    @property
    def concept(self) -> Optional[str]:
        if "concept" in self.data_source:
            return self.data_source["concept"]
        if "field" in self.data_source:
            # table+field addressing: the warehouse's fact table is keyed by concept
            return self.data_source["field"]
        return None

    @property
    def derived_from(self) -> tuple[str, ...]:
        return tuple(self.data_source.get("variables", ()))

    @staticmethod
    def from_json(doc: dict) -> "VariableDef":
        return VariableDef(
            name=doc["name"],
            data_source=doc["data_source"],
            operation=doc["operation"],
            value=doc.get("value"),
            timeframe=TimeframeSpec.from_json(doc.get("timeframe")),
            constraints=tuple(doc.get("constraints", ())),
            mapping=doc.get("mapping", {"policy": "default"}),
        )

    def to_json(self) -> dict:
        return {
            "name": self.name, "data_source": self.data_source, "operation": self.operation,
            "value": self.value, "timeframe": self.timeframe.to_json(),
            "constraints": list(self.constraints), "mapping": self.mapping,
        }


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    project_id: str
    variables: tuple[VariableDef, ...]
    cohort: dict = field(default_factory=lambda: {"all": True})
    index_event: Optional[str] = None  # concept designating one row per event

    @staticmethod
    def from_json(doc: dict) -> "DatasetSpec":
        return DatasetSpec(
            name=doc["name"], project_id=doc["project_id"],
            variables=tuple(VariableDef.from_json(v) for v in doc["variables"]),
            cohort=doc.get("cohort", {"all": True}),
            index_event=doc.get("index_event"),
        )

    def to_json(self) -> dict:
        return {"name": self.name, "project_id": self.project_id,
                "variables": [v.to_json() for v in self.variables],
                "cohort": self.cohort, "index_event": self.index_event}


# ---------------------------------------------------------------------------
# operation library
# ---------------------------------------------------------------------------

def _render_fact_value(fact) -> str:
    return render_value(fact.value_kind, fact.value)


def _op_identity(facts, value, ctx):
    if not facts:
        return None
    latest = max(facts, key=lambda f: (f.effective_start, f.fact_id))
    return latest.value


def _match_like(text: str, needle: str, mode: str) -> bool:
    if mode == "like":
        return needle in text
    if mode == "right-like":
        return text.startswith(needle)
    return text.endswith(needle)


def _op_like_factory(mode):
    def op(facts, value, ctx):
        needle = "" if value is None else str(value)
        matches = sorted({_render_fact_value(f) for f in facts
                          if _match_like(_render_fact_value(f), needle, mode)})
        return LIST_SEPARATOR.join(matches) if matches else None
    return op


def _filtered(facts, value):
    if value is None:
        return facts
    needle = str(value)
    return [f for f in facts if _render_fact_value(f) == needle]


def _op_exists(facts, value, ctx):
    return bool(_filtered(facts, value))


def _op_count(facts, value, ctx):
    return float(len(_filtered(facts, value)))


def _op_first(facts, value, ctx):
    if not facts:
        return None
    return min(facts, key=lambda f: (f.effective_start, f.fact_id)).value


def _op_last(facts, value, ctx):
    return _op_identity(facts, value, ctx)


def _numeric_values(facts):
    return [float(f.value) for f in facts
            if f.value_kind is ValueKind.NUMBER and f.value is not None]


def _op_min(facts, value, ctx):
    nums = _numeric_values(facts)
    return min(nums) if nums else None


def _op_max(facts, value, ctx):
    nums = _numeric_values(facts)
    return max(nums) if nums else None


def _op_mean(facts, value, ctx):
    nums = _numeric_values(facts)
    return sum(nums) / len(nums) if nums else None


def _op_time_series(facts, value, ctx):
    if not facts:
        return None
    series = [(f.effective_start, render_value(f.value_kind, f.value))
              for f in sorted(facts, key=lambda f: (f.effective_start, f.fact_id))]
    return SeriesValue(tuple(series))


@dataclass(frozen=True)
class SeriesValue:
    """An ordered (timestamp, value) aggregation; materialized to a blob at
    join time, the cell holds the blob key."""

    points: tuple[tuple[int, str], ...]

    def to_json(self) -> list:
        return [[render_ts(ts), v] for ts, v in self.points]


# output value kind per operation ("source" keeps the concept's kind)
OPERATIONS: dict[str, tuple] = {
    "Identity": (_op_identity, "source"),
    "Like": (_op_like_factory("like"), "text-list"),
    "Right-Like": (_op_like_factory("right-like"), "text-list"),
    "Left-Like": (_op_like_factory("left-like"), "text-list"),
    "Exists": (_op_exists, "boolean"),
    "Count": (_op_count, "number"),
    "First": (_op_first, "source"),
    "Last": (_op_last, "source"),
    "Min": (_op_min, "number"),
    "Max": (_op_max, "number"),
    "Mean": (_op_mean, "number"),
    "Time-Series": (_op_time_series, "series-ref"),
}


def register_operation(name: str, func, output_kind: str = "source") -> None:
    """Extension point: contributed operations become available to all users."""
    OPERATIONS[name] = (func, output_kind)


_DERIVED_OPS = {"Identity", "Exists", "Count", "Min", "Max", "Mean",
                "Like", "Right-Like", "Left-Like"}


# ---------------------------------------------------------------------------
# spec validation
# ---------------------------------------------------------------------------

def _load_orderings() -> list[list[str]]:
    doc = json.loads(resources.files("factline").joinpath("config/orderings.json").read_text())
    return doc["orderings"]


def validate_spec(spec: DatasetSpec, registry: ConceptRegistry) -> None:
    problems = []
    names = [v.name for v in spec.variables]
    if len(set(names)) != len(names):
        problems.append("variable names must be unique within a dataset spec")
    known = set(names)
    for v in spec.variables:
        if v.operation not in OPERATIONS:
            raise UnknownOperation(v.operation)
        if v.concept is not None and v.concept not in registry:
            raise UnknownConcept(v.concept)
        if v.derived_from:
            if v.operation not in _DERIVED_OPS:
                problems.append(f"{v.name}: operation {v.operation} cannot take derived input")
            missing = [d for d in v.derived_from if d not in known]
            if missing:
                problems.append(f"{v.name}: derived from unknown variable(s) {missing}")
        elif v.concept is None:
            problems.append(f"{v.name}: data_source must name a concept or variables")
        for c in v.constraints:
            if c not in known:
                problems.append(f"{v.name}: constraint {c!r} is not a variable")
        if v.timeframe.kind == "anchor-relative" and v.timeframe.anchor[0] not in registry:
            raise UnknownConcept(v.timeframe.anchor[0])
        if v.mapping.get("policy") == "user-defined" and not v.mapping.get("entries"):
            problems.append(f"{v.name}: user-defined mapping requires entries")
    if spec.index_event is not None and spec.index_event not in registry:
        raise UnknownConcept(spec.index_event)

    # constraint and derivation references must be acyclic
    graph = {v.name: set(v.constraints) | set(v.derived_from) for v in spec.variables}
    state: dict[str, int] = {}

    def visit(node: str) -> None:
        if state.get(node) == 1:
            raise CyclicConstraint(node)
        if state.get(node) == 2:
            return
        state[node] = 1
        for dep in graph.get(node, ()):
            visit(dep)
        state[node] = 2

    for name in graph:
        visit(name)

    if problems:
        raise ValidationFailed({i: p for i, p in enumerate(problems)})


def resolve_scheme(vdef: VariableDef, registry: ConceptRegistry) -> Optional[MappingScheme]:
    """The scheme translating this variable's text cells to numbers, or None
    when the column is not choice-valued.
    """
    concept = vdef.concept
    if concept is None:
        return None
    cdef = registry.get(concept)
    if cdef.value_kind is not ValueKind.TEXT_CHOICE:
        return None
    policy = vdef.mapping.get("policy", "default")
    if policy == "default":
        return registry.default_scheme(concept)
    if policy == "alphabetical":
        ordered = sorted(cdef.choices)
    elif policy == "common-ordering":
        ordered = None
        for candidate in _load_orderings():
            if set(candidate) == set(cdef.choices):
                ordered = candidate
                break
        if ordered is None:
            raise ValidationFailed({vdef.name: f"no common ordering covers {cdef.choices}"})
    elif policy == "user-defined":
        return MappingScheme(
            scheme_id=f"user:{vdef.name}", concept=concept,
            entries=tuple((t, float(n)) for t, n in vdef.mapping["entries"]),
            origin=SchemeOrigin.USER_DEFINED)
    else:
        raise ValidationFailed({vdef.name: f"unknown mapping policy {policy!r}"})
    return MappingScheme(
        scheme_id=f"{policy}:{concept}", concept=concept,
        entries=tuple((t, float(i)) for i, t in enumerate(ordered)),
        origin=SchemeOrigin(policy if policy != "default" else "translator-default"))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def compute_rows(warehouse: Warehouse, registry: ConceptRegistry, spec: DatasetSpec,
                 snapshot: WarehouseSnapshot) -> list[tuple[str, Optional[int]]]:
    """Row units: one per patient, or one per (patient, index event) when an
    index event concept is designated. Deterministic order.
    """
    if spec.cohort.get("patients"):
        patients = sorted(spec.cohort["patients"])
    else:
        patients = warehouse.patients(snapshot)
    if spec.index_event is None:
        return [(p, None) for p in patients]
    rows = []
    for chunk_start in range(0, len(patients), 500):
        chunk = patients[chunk_start:chunk_start + 500]
        for fact in warehouse.facts_for_concept(spec.index_event, patients=chunk,
                                                snapshot=snapshot):
            rows.append((fact.patient_id, fact.effective_start))
    rows.sort()
    return rows


def _window_for_row(vdef: VariableDef, row: tuple[str, Optional[int]],
                    anchor_lookup) -> Optional[tuple[int, int]]:
    tf = vdef.timeframe
    if tf.kind == "always":
        return None
    if tf.kind == "absolute-range":
        return tf.range
    concept, before, after = tf.anchor
    patient_id, row_anchor = row
    anchor_ms = row_anchor if row_anchor is not None and anchor_lookup.get("_index") == concept \
        else anchor_lookup.get((patient_id, concept))
    if anchor_ms is None:
        return (1, 0)  # no anchor event: empty window excludes everything
    return (anchor_ms - before, anchor_ms + after)


def _fact_in_window(fact, window: Optional[tuple[int, int]]) -> bool:
    if window is None:
        return True
    start, end = window
    if fact.effective_end is None:
        return start <= fact.effective_start < end
    return fact.effective_start < end and fact.effective_end > start  # interval overlap


def evaluate_variable(warehouse: Warehouse, registry: ConceptRegistry, vdef: VariableDef,
                      rows: Sequence[tuple[str, Optional[int]]],
                      snapshot: WarehouseSnapshot,
                      index_event: Optional[str] = None) -> list:
    """One value per row for a concept-sourced variable, at a snapshot.
    Missing data is an explicit None. Deterministic given the snapshot.
    """
    concept = vdef.concept
    if concept is None:
        raise ValidationFailed({vdef.name: "evaluate_variable requires a concept source"})
    op, _ = OPERATIONS[vdef.operation]

    patients = sorted({p for p, _ in rows})
    by_patient: dict[str, list] = {p: [] for p in patients}
    for start in range(0, len(patients), 500):
        chunk = patients[start:start + 500]
        for fact in warehouse.facts_for_concept(concept, patients=chunk, snapshot=snapshot):
            by_patient[fact.patient_id].append(fact)

    anchor_lookup: dict = {"_index": index_event}
    if vdef.timeframe.kind == "anchor-relative":
        anchor_concept = vdef.timeframe.anchor[0]
        if anchor_concept != index_event:
            for start in range(0, len(patients), 500):
                chunk = patients[start:start + 500]
                for fact in warehouse.facts_for_concept(anchor_concept, patients=chunk,
                                                        snapshot=snapshot):
                    key = (fact.patient_id, anchor_concept)
                    if key not in anchor_lookup or fact.effective_start < anchor_lookup[key]:
                        anchor_lookup[key] = fact.effective_start

    column = []
    for row in rows:
        window = _window_for_row(vdef, row, anchor_lookup)
        candidates = [f for f in by_patient.get(row[0], ()) if _fact_in_window(f, window)]
        column.append(op(candidates, vdef.value, None))
    return column


@dataclass(frozen=True)
class _PseudoFact:
    """Adapter presenting an already-computed cell to the operation library."""

    value: Any
    value_kind: ValueKind
    effective_start: int = 0
    effective_end: Optional[int] = None
    fact_id: str = ""


def _column_kind(vdef: VariableDef, registry: ConceptRegistry,
                 kinds_so_far: dict[str, ValueKind]) -> ValueKind:
    _, out = OPERATIONS[vdef.operation]
    if out == "number":
        return ValueKind.NUMBER
    if out == "boolean":
        return ValueKind.BOOLEAN
    if out == "series-ref":
        return ValueKind.SERIES_REF
    if out == "text-list":
        return ValueKind.TEXT_CHOICE
    if vdef.concept is not None:
        return registry.get(vdef.concept).value_kind
    first = vdef.derived_from[0]
    return kinds_so_far[first]


def evaluate_derived(vdef: VariableDef, columns: dict[str, list],
                     kinds: dict[str, ValueKind], n_rows: int) -> list:
    op, _ = OPERATIONS[vdef.operation]
    out = []
    for i in range(n_rows):
        pseudo = [
            _PseudoFact(value=columns[name][i], value_kind=kinds[name])
            for name in vdef.derived_from
            if columns[name][i] is not None and not isinstance(columns[name][i], SeriesValue)
        ]
        out.append(op(pseudo, vdef.value, None))
    return out


# ---------------------------------------------------------------------------
# dataset generation (fan-out / join over the broker)
# ---------------------------------------------------------------------------

def dataset_id_for(project_id: str, name: str) -> str:
    return hashlib.sha256(f"dataset|{project_id}|{name}".encode()).hexdigest()[:16]


def _eval_job_id(dataset_id: str, version: int, variable: str, shard: int) -> str:
    return hashlib.sha256(
        f"eval|{dataset_id}|v{version}|{variable}|{shard}".encode()).hexdigest()[:32]


def _join_job_id(dataset_id: str, version: int) -> str:
    return hashlib.sha256(f"join|{dataset_id}|v{version}".encode()).hexdigest()[:32]


def _base_key(dataset_id: str, version: int) -> str:
    return f"{dataset_id}/v{version}"


def launch_dataset(warehouse: Warehouse, blobs: BlobStore, broker: Broker,
                   registry: ConceptRegistry, spec: DatasetSpec, created_by: str,
                   shard_size: int = DEFAULT_SHARD_SIZE) -> tuple[str, int]:
    """Validate, snapshot, persist the manifest, and fan out evaluation jobs.
    Returns (dataset_id, version); completion is observable via get_dataset.
    """
    validate_spec(spec, registry)
    for v in spec.variables:
        resolve_scheme(v, registry)  # surfaces mapping problems before launch
    snapshot = warehouse.snapshot()
    dataset_id = dataset_id_for(spec.project_id, spec.name)

    translator_versions = {
        r[0]: r[1] for r in warehouse.query(
            "SELECT translator_id, version FROM translator_configs ORDER BY translator_id")}

    with warehouse.transaction() as conn:
        row = conn.execute("SELECT COALESCE(MAX(version), 0) FROM datasets WHERE dataset_id = ?",
                           (dataset_id,)).fetchone()
        version = int(row[0]) + 1
        conn.execute(
            "INSERT INTO datasets (dataset_id, version, project_id, name, spec, snapshot_id,"
            " translator_versions, created_by, created_at, state)"
            " VALUES (?,?,?,?,?,?,?,?,?, 'pending')",
            (dataset_id, version, spec.project_id, spec.name,
             json.dumps(spec.to_json(), sort_keys=True), snapshot.snapshot_id,
             json.dumps(translator_versions, sort_keys=True), created_by, utc_now_ms()))

    rows = compute_rows(warehouse, registry, spec, snapshot)
    blobs.put(DATASET_BUCKET, f"{_base_key(dataset_id, version)}/rows.json",
              json.dumps(rows, sort_keys=True).encode(), if_absent=True)

    n_shards = max(1, -(-len(rows) // shard_size))
    base_vars = [v for v in spec.variables if not v.derived_from]
    for vdef in base_vars:
        for shard in range(n_shards):
            broker.publish(DATASET_QUEUE, "eval-variable", {
                "dataset_id": dataset_id, "version": version, "variable": vdef.name,
                "shard": shard, "n_shards": n_shards, "shard_size": shard_size,
            }, job_id=_eval_job_id(dataset_id, version, vdef.name, shard))
    if not base_vars:
        broker.publish(DATASET_QUEUE, "join-dataset",
                       {"dataset_id": dataset_id, "version": version},
                       job_id=_join_job_id(dataset_id, version))

    with warehouse.transaction() as conn:
        conn.execute("INSERT OR IGNORE INTO provenance (subject_kind, subject_id, parent_kind,"
                     " parent_id, code_version, created_at) VALUES (?,?,?,?,?,?)",
                     ("dataset", f"{dataset_id}/v{version}", "snapshot", snapshot.snapshot_id,
                      json.dumps(translator_versions, sort_keys=True), utc_now_ms()))
    return dataset_id, version


def _load_manifest(warehouse: Warehouse, dataset_id: str, version: int):
    row = warehouse.one("SELECT * FROM datasets WHERE dataset_id = ? AND version = ?",
                        (dataset_id, version))
    if row is None:
        raise NotFound(f"dataset {dataset_id} v{version}")
    return row


def _cell_to_json(value) -> Any:
    if isinstance(value, SeriesValue):
        return {"__series__": value.to_json()}
    return value


def _cell_from_json(value) -> Any:
    if isinstance(value, dict) and "__series__" in value:
        from .model import parse_ts
        return SeriesValue(tuple((parse_ts(ts), v) for ts, v in value["__series__"]))
    return value


def handle_eval_job(body: dict, warehouse: Warehouse, blobs: BlobStore, broker: Broker,
                    registry: ConceptRegistry) -> None:
    dataset_id, version = body["dataset_id"], body["version"]
    manifest = _load_manifest(warehouse, dataset_id, version)
    spec = DatasetSpec.from_json(json.loads(manifest["spec"]))
    snapshot = warehouse.get_snapshot(manifest["snapshot_id"])
    rows = [tuple(r) for r in json.loads(
        blobs.get(DATASET_BUCKET, f"{_base_key(dataset_id, version)}/rows.json"))]

    shard, shard_size = body["shard"], body["shard_size"]
    shard_rows = rows[shard * shard_size:(shard + 1) * shard_size]
    vdef = next(v for v in spec.variables if v.name == body["variable"])
    column = evaluate_variable(warehouse, registry, vdef, shard_rows, snapshot,
                               index_event=spec.index_event)

    part_key = f"{_base_key(dataset_id, version)}/parts/{vdef.name}/{shard:05d}.json"
    blobs.put(DATASET_BUCKET, part_key,
              json.dumps([_cell_to_json(c) for c in column]).encode(), if_absent=True)
    with warehouse.transaction() as conn:
        conn.execute("INSERT OR IGNORE INTO dataset_parts (dataset_id, version, variable,"
                     " shard, blob_key) VALUES (?,?,?,?,?)",
                     (dataset_id, version, vdef.name, shard, part_key))

    base_vars = [v for v in spec.variables if not v.derived_from]
    done = warehouse.one(
        "SELECT COUNT(*) FROM dataset_parts WHERE dataset_id = ? AND version = ?",
        (dataset_id, version))[0]
    if done >= len(base_vars) * body["n_shards"]:
        broker.publish(DATASET_QUEUE, "join-dataset",
                       {"dataset_id": dataset_id, "version": version},
                       job_id=_join_job_id(dataset_id, version))


def _human_cell(value, kind: ValueKind) -> str:
    if value is None:
        return MISSING
    if isinstance(value, SeriesValue):
        raise TypeError("series cells are materialized before rendering")
    if kind is ValueKind.TEXT_CHOICE and isinstance(value, str):
        return value
    return render_value(kind, value)


def _numeric_cell(value, kind: ValueKind, scheme: Optional[MappingScheme]) -> str:
    if value is None:
        return MISSING
    if kind is ValueKind.SERIES_REF:
        return str(value)
    if kind is ValueKind.BOOLEAN:
        return "1" if value else "0"
    if kind is ValueKind.TIMESTAMP:
        return str(int(value))
    if kind is ValueKind.TEXT_CHOICE:
        if scheme is None:
            return str(value)
        mapped = [render_value(ValueKind.NUMBER, scheme.to_number()[part])
                  for part in str(value).split(LIST_SEPARATOR)]
        return LIST_SEPARATOR.join(mapped)
    return render_value(ValueKind.NUMBER, value)


def handle_join_job(body: dict, warehouse: Warehouse, blobs: BlobStore, broker: Broker,
                    registry: ConceptRegistry) -> None:
    """Single-writer join: assemble columns, compute derived variables, apply
    constraints, and emit the version-controlled human + numeric files.
    """
    dataset_id, version = body["dataset_id"], body["version"]
    manifest = _load_manifest(warehouse, dataset_id, version)
    spec = DatasetSpec.from_json(json.loads(manifest["spec"]))
    base = _base_key(dataset_id, version)
    rows = [tuple(r) for r in json.loads(blobs.get(DATASET_BUCKET, f"{base}/rows.json"))]
    n_rows = len(rows)

    columns: dict[str, list] = {}
    kinds: dict[str, ValueKind] = {}
    for vdef in spec.variables:
        if vdef.derived_from:
            continue
        parts = warehouse.query(
            "SELECT shard, blob_key FROM dataset_parts WHERE dataset_id = ? AND version = ?"
            " AND variable = ? ORDER BY shard", (dataset_id, version, vdef.name))
        column: list = []
        for _, key in parts:
            column.extend(_cell_from_json(c)
                          for c in json.loads(blobs.get(DATASET_BUCKET, key)))
        columns[vdef.name] = column
        kinds[vdef.name] = _column_kind(vdef, registry, kinds)

    for vdef in _topological(spec.variables):
        if not vdef.derived_from:
            continue
        kinds[vdef.name] = _column_kind(vdef, registry, kinds)
        columns[vdef.name] = evaluate_derived(vdef, columns, kinds, n_rows)

    # constraint semantics: a row survives only if every constraint variable
    # referenced anywhere in the spec is truthy for it
    keep = []
    for i in range(n_rows):
        ok = True
        for vdef in spec.variables:
            for c in vdef.constraints:
                if not _truthy(columns[c][i]):
                    ok = False
                    break
            if not ok:
                break
        keep.append(ok)

    # materialize series cells to their own blobs; the cell holds the key
    for vdef in spec.variables:
        column = columns[vdef.name]
        for i, value in enumerate(column):
            if isinstance(value, SeriesValue):
                key = f"{base}/series/{vdef.name}/{i:06d}.json"
                blobs.put(DATASET_BUCKET, key, json.dumps(value.to_json()).encode(),
                          if_absent=True)
                column[i] = f"{DATASET_BUCKET}/{key}"

    schemes = {v.name: resolve_scheme(v, registry) for v in spec.variables}
    header = ["patient_id"] + (["index_time"] if spec.index_event else []) \
        + [v.name for v in spec.variables]

    human = io.StringIO()
    numeric = io.StringIO()
    hw, nw = csv.writer(human), csv.writer(numeric)
    hw.writerow(header)
    nw.writerow(header)
    kept_rows = 0
    for i, (patient_id, anchor) in enumerate(rows):
        if not keep[i]:
            continue
        kept_rows += 1
        hrow, nrow = [patient_id], [patient_id]
        if spec.index_event:
            hrow.append(render_ts(anchor))
            nrow.append(str(int(anchor)))
        for vdef in spec.variables:
            value = columns[vdef.name][i]
            hrow.append(_human_cell(value, kinds[vdef.name]))
            nrow.append(_numeric_cell(value, kinds[vdef.name], schemes[vdef.name]))
        hw.writerow(hrow)
        nw.writerow(nrow)

    human_key = f"{base}/human.csv"
    numeric_key = f"{base}/numeric.csv"
    blobs.put(DATASET_BUCKET, human_key, human.getvalue().encode(), if_absent=True)
    blobs.put(DATASET_BUCKET, numeric_key, numeric.getvalue().encode(), if_absent=True)
    blobs.put(DATASET_BUCKET, f"{base}/numeric.npy",
              _npy_bytes(numeric.getvalue(), len(header) - len(spec.variables)),
              if_absent=True)

    with warehouse.transaction() as conn:
        conn.execute(
            "UPDATE datasets SET state = 'complete', row_count = ?, human_key = ?,"
            " numeric_key = ? WHERE dataset_id = ? AND version = ?",
            (kept_rows, f"{DATASET_BUCKET}/{human_key}", f"{DATASET_BUCKET}/{numeric_key}",
             dataset_id, version))
    # dataset analysis is automatically triggered on creation
    broker.publish(ANALYSIS_QUEUE, "analyze-dataset",
                   {"dataset_id": dataset_id, "version": version},
                   job_id=hashlib.sha256(f"analyze|{dataset_id}|v{version}".encode())
                   .hexdigest()[:32])


def _truthy(value) -> bool:
    if value is None or value is False:
        return False
    if isinstance(value, str):
        return value != ""
    if isinstance(value, (int, float)):
        return value != 0
    return True


def _topological(variables: Sequence[VariableDef]) -> list[VariableDef]:
    by_name = {v.name: v for v in variables}
    seen: dict[str, int] = {}
    order: list[VariableDef] = []

    def visit(v: VariableDef):
        if seen.get(v.name):
            return
        seen[v.name] = 1
        for dep in v.derived_from:
            visit(by_name[dep])
        order.append(v)

    for v in variables:
        visit(v)
    return order


def _npy_bytes(numeric_csv: str, leading_cols: int) -> bytes:
    """Dense float matrix companion for the numeric file (single-file array
    container, format version 1.0). Cells that are not single numbers are NaN.
    """
    reader = csv.reader(io.StringIO(numeric_csv))
    rows = list(reader)[1:]
    matrix = np.full((len(rows), max(len(rows[0]) - leading_cols, 0) if rows else 0),
                     np.nan, dtype=np.float64)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row[leading_cols:]):
            try:
                matrix[i, j] = float(cell)
            except ValueError:
                pass
    buf = io.BytesIO()
    np.save(buf, matrix)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# retrieval and synchronous convenience
# ---------------------------------------------------------------------------

def get_dataset(warehouse: Warehouse, dataset_id: str, version: Optional[int] = None) -> dict:
    if version is None:
        row = warehouse.one("SELECT MAX(version) FROM datasets WHERE dataset_id = ?",
                            (dataset_id,))
        if row is None or row[0] is None:
            raise NotFound(f"dataset {dataset_id}")
        version = int(row[0])
    manifest = _load_manifest(warehouse, dataset_id, version)
    return {
        "dataset_id": manifest["dataset_id"], "version": manifest["version"],
        "project_id": manifest["project_id"], "name": manifest["name"],
        "spec": json.loads(manifest["spec"]), "snapshot_id": manifest["snapshot_id"],
        "translator_versions": json.loads(manifest["translator_versions"]),
        "row_count": manifest["row_count"], "created_by": manifest["created_by"],
        "created_at": manifest["created_at"], "state": manifest["state"],
        "files": {"human": manifest["human_key"], "numeric": manifest["numeric_key"]},
        "qa_report": json.loads(manifest["qa_report"]) if manifest["qa_report"] else None,
    }


def list_datasets(warehouse: Warehouse, project_id: Optional[str] = None) -> list[dict]:
    sql = "SELECT dataset_id, version FROM datasets"
    params: tuple = ()
    if project_id:
        sql += " WHERE project_id = ?"
        params = (project_id,)
    sql += " ORDER BY created_at, dataset_id, version"
    return [get_dataset(warehouse, r[0], r[1]) for r in warehouse.query(sql, params)]


def validate_dataset(warehouse: Warehouse, blobs: BlobStore, registry: ConceptRegistry,
                     dataset_id: str, version: int) -> dict:
    """Dataset-validation pathway: recheck dual-file coherence cell by cell.
    The report is stored on the manifest; release is not blocked.
    """
    manifest = _load_manifest(warehouse, dataset_id, version)
    spec = DatasetSpec.from_json(json.loads(manifest["spec"]))
    base = _base_key(dataset_id, version)
    human = list(csv.reader(io.StringIO(
        blobs.get(DATASET_BUCKET, f"{base}/human.csv").decode())))
    numeric = list(csv.reader(io.StringIO(
        blobs.get(DATASET_BUCKET, f"{base}/numeric.csv").decode())))
    mismatches = []
    if [len(r) for r in human] != [len(r) for r in numeric]:
        mismatches.append("shape mismatch between human and numeric files")
    schemes = {v.name: resolve_scheme(v, registry) for v in spec.variables}
    lead = 1 + (1 if spec.index_event else 0)
    for r, (hrow, nrow) in enumerate(zip(human[1:], numeric[1:])):
        for c, vdef in enumerate(spec.variables):
            hcell, ncell = hrow[lead + c], nrow[lead + c]
            scheme = schemes[vdef.name]
            if scheme is not None and hcell != MISSING:
                expect = LIST_SEPARATOR.join(
                    render_value(ValueKind.NUMBER, scheme.to_number()[p])
                    for p in hcell.split(LIST_SEPARATOR))
                if ncell != expect:
                    mismatches.append(f"row {r} col {vdef.name}: {hcell!r} -> {ncell!r}")
    report = {"checked_at": utc_now_ms(), "rows": len(human) - 1,
              "mismatches": mismatches, "ok": not mismatches}
    with warehouse.transaction() as conn:
        conn.execute("UPDATE datasets SET qa_report = ? WHERE dataset_id = ? AND version = ?",
                     (json.dumps(report, sort_keys=True), dataset_id, version))
    return report


def generate_dataset(deployment, spec: DatasetSpec, created_by: str = "system",
                     shard_size: int = DEFAULT_SHARD_SIZE) -> dict:
    """Synchronous convenience: launch, drain the dataset and analysis queues
    in-process (analysis auto-triggers on completion), and return the manifest.
    """
    dataset_id, version = launch_dataset(
        deployment.warehouse, deployment.blobs, deployment.broker, deployment.registry,
        spec, created_by, shard_size=shard_size)
    deployment.run_until_idle(queues=[DATASET_QUEUE, ANALYSIS_QUEUE])
    return get_dataset(deployment.warehouse, dataset_id, version)
