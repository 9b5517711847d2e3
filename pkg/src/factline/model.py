"""Shared data model: source records, atomic facts, mapping schemes, and the
four storage invariants (atomicity, consistency, translatability, traceability)
as machine-checkable validation.

Values are immutable after construction and safe to share between workers.
Timestamps are UTC epoch milliseconds; intervals are closed-open [start, end).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Union

from .errors import UnknownConcept, UnmappedValue, UnrecognizedValue

EPOCH_MS = int
Interval = tuple[EPOCH_MS, EPOCH_MS]
EffectiveTime = Union[EPOCH_MS, Interval]


def utc_now_ms() -> EPOCH_MS:
    return int(datetime.now(tz=timezone.utc).timestamp() * 1000)


def parse_ts(text: str) -> EPOCH_MS:
    """Parse an ISO-8601 timestamp to UTC epoch milliseconds."""
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return round(dt.timestamp() * 1000)


def render_ts(ms: EPOCH_MS) -> str:
    """Render epoch milliseconds as ISO-8601 with millisecond precision."""
    seconds, msec = divmod(int(ms), 1000)
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{msec:03d}Z"


class SourceKind(str, Enum):
    SYNTHETIC_EHR = "synthetic-ehr"
    FILE_UPLOAD = "file-upload"
    MANUAL_CORRECTION = "manual-correction"


class ValueKind(str, Enum):
    NUMBER = "number"
    BOOLEAN = "boolean"
    TEXT_CHOICE = "text-choice"
    TIMESTAMP = "timestamp"
    SERIES_REF = "series-ref"


class SchemeOrigin(str, Enum):
    TRANSLATOR_DEFAULT = "translator-default"
    COMMON_ORDERING = "common-ordering"
    ALPHABETICAL = "alphabetical"
    USER_DEFINED = "user-defined"


@dataclass(frozen=True)
class SourceRecord:
    """One immutable raw datum as received from a source.

    The payload is stored verbatim; interpretation happens downstream.
    Corrections never overwrite a record: a new manual-correction record
    supersedes it (``supersedes`` holds the replaced record id).
    """

    record_id: str
    patient_id: str
    source_kind: SourceKind
    category: str
    payload: str
    received_at: EPOCH_MS
    batch_id: str
    supersedes: Optional[str] = None


@dataclass(frozen=True)
class AtomicFact:
    """One indivisible, canonicalized data attribute with provenance links."""

    fact_id: str
    patient_id: str
    concept: str
    value_kind: ValueKind
    value: Any
    unit: Optional[str]
    effective_time: EffectiveTime
    source_record_id: str
    translator_id: str
    translator_version: int
    group_key: Optional[str] = None

    @property
    def effective_start(self) -> EPOCH_MS:
        t = self.effective_time
        return t[0] if isinstance(t, tuple) else t

    @property
    def effective_end(self) -> Optional[EPOCH_MS]:
        t = self.effective_time
        return t[1] if isinstance(t, tuple) else None


def fact_natural_key(patient_id: str, concept: str, effective_time: EffectiveTime,
                     source_record_id: str, group_key: Optional[str]) -> str:
    start = effective_time[0] if isinstance(effective_time, tuple) else effective_time
    end = effective_time[1] if isinstance(effective_time, tuple) else None
    return "|".join([patient_id, concept, str(start), str(end), source_record_id, group_key or ""])


def make_fact_id(patient_id: str, concept: str, effective_time: EffectiveTime,
                 source_record_id: str, group_key: Optional[str],
                 translator_version: int) -> str:
    """Deterministic fact id so redelivered work upserts identically."""
    key = fact_natural_key(patient_id, concept, effective_time, source_record_id, group_key)
    return hashlib.sha256(f"fact|{key}|v{translator_version}".encode()).hexdigest()[:32]


@dataclass(frozen=True)
class MappingScheme:
    """Bijection between a concept's text choices and distinct numbers."""

    scheme_id: str
    concept: str
    entries: tuple[tuple[str, float], ...]
    origin: SchemeOrigin

    def __post_init__(self) -> None:
        texts = [t for t, _ in self.entries]
        numbers = [n for _, n in self.entries]
        if len(set(texts)) != len(texts) or len(set(numbers)) != len(numbers):
            raise ValueError(f"scheme {self.scheme_id}: entries must be a bijection")

    def to_number(self) -> dict[str, float]:
        return dict(self.entries)

    def to_text(self) -> dict[float, str]:
        return {n: t for t, n in self.entries}


def apply_mapping(scheme: MappingScheme, value: str) -> float:
    try:
        return scheme.to_number()[value]
    except KeyError:
        raise UnmappedValue(f"{value!r} not in scheme {scheme.scheme_id} for {scheme.concept}") from None


def unapply_mapping(scheme: MappingScheme, number: float) -> str:
    try:
        return scheme.to_text()[number]
    except KeyError:
        raise UnmappedValue(f"{number!r} not in scheme {scheme.scheme_id} for {scheme.concept}") from None


def alphabetical_scheme(concept: str, choices: Iterable[str]) -> MappingScheme:
    ordered = sorted(set(choices))
    return MappingScheme(
        scheme_id=f"alphabetical:{concept}",
        concept=concept,
        entries=tuple((text, float(i)) for i, text in enumerate(ordered)),
        origin=SchemeOrigin.ALPHABETICAL,
    )


@dataclass(frozen=True)
class Provenance:
    subject_kind: str  # fact | dataset | model-artifact
    subject_id: str
    parent_kind: str
    parent_id: str
    code_version: str
    created_at: EPOCH_MS


@dataclass(frozen=True)
class Protocol:
    protocol_id: str
    title: str
    active: bool = True


@dataclass(frozen=True)
class Project:
    project_id: str
    protocol_id: str
    name: str


@dataclass(frozen=True)
class User:
    user_id: str
    display_name: str
    roles: frozenset[str] = field(default_factory=frozenset)
    protocol_ids: frozenset[str] = field(default_factory=frozenset)


@dataclass(frozen=True)
class ConceptDef:
    """Registry entry: what one concept means and how it must be stored."""

    name: str
    value_kind: ValueKind
    unit: Optional[str] = None
    choices: tuple[str, ...] = ()
    expected_range: Optional[tuple[float, float]] = None
    # synonym lists for boolean concepts: canonical -> accepted raw spellings
    true_synonyms: tuple[str, ...] = ()
    false_synonyms: tuple[str, ...] = ()
    null_synonyms: tuple[str, ...] = ()


class ConceptRegistry:
    """Flat concept vocabulary, loadable from a JSON document on disk.

    Translator-default mapping schemes are created for every text-choice
    concept at registration time, in declared choice order.
    """

    def __init__(self) -> None:
        self._concepts: dict[str, ConceptDef] = {}
        self._default_schemes: dict[str, MappingScheme] = {}

    def register(self, concept: ConceptDef) -> None:
        self._concepts[concept.name] = concept
        if concept.value_kind is ValueKind.TEXT_CHOICE and concept.choices:
            self._default_schemes[concept.name] = MappingScheme(
                scheme_id=f"default:{concept.name}",
                concept=concept.name,
                entries=tuple((c, float(i)) for i, c in enumerate(concept.choices)),
                origin=SchemeOrigin.TRANSLATOR_DEFAULT,
            )

    def get(self, name: str) -> ConceptDef:
        try:
            return self._concepts[name]
        except KeyError:
            raise UnknownConcept(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._concepts

    def names(self) -> list[str]:
        return sorted(self._concepts)

    def default_scheme(self, concept: str) -> Optional[MappingScheme]:
        return self._default_schemes.get(concept)

    def load_file(self, path: Union[str, Path]) -> None:
        """Load (or hot-reload) concept definitions from a JSON document."""
        doc = json.loads(Path(path).read_text())
        for name, spec in doc.get("concepts", {}).items():
            syn = spec.get("synonyms", {})
            rng = spec.get("expected_range")
            self.register(ConceptDef(
                name=name,
                value_kind=ValueKind(spec["value_kind"]),
                unit=spec.get("unit"),
                choices=tuple(spec.get("choices", ())),
                expected_range=tuple(rng) if rng else None,
                true_synonyms=tuple(syn.get("true", ())),
                false_synonyms=tuple(syn.get("false", ())),
                null_synonyms=tuple(syn.get("null", ())),
            ))


def canonicalize_boolean(raw: str, concept: Union[str, ConceptDef],
                         registry: Optional[ConceptRegistry] = None) -> Optional[bool]:
    """Map a raw boolean-ish spelling to True/False, or None if the value is a
    configured inconclusive synonym. Matching is case-insensitive and trimmed.
    """
    cdef = registry.get(concept) if isinstance(concept, str) else concept
    if registry is None and isinstance(concept, str):
        raise UnknownConcept(concept)
    needle = raw.strip().lower()
    if needle in (s.lower() for s in cdef.true_synonyms):
        return True
    if needle in (s.lower() for s in cdef.false_synonyms):
        return False
    if needle in (s.lower() for s in cdef.null_synonyms):
        return None
    raise UnrecognizedValue(f"{raw!r} is not a recognized value for {cdef.name}")


def render_value(kind: ValueKind, value: Any) -> str:
    """Canonical text rendering used in human-readable outputs."""
    if value is None:
        return ""
    if kind is ValueKind.BOOLEAN:
        return "true" if value else "false"
    if kind is ValueKind.TIMESTAMP:
        return render_ts(int(value))
    if kind is ValueKind.NUMBER:
        f = float(value)
        return str(int(f)) if f.is_integer() else repr(f)
    return str(value)


@dataclass(frozen=True)
class Violation:
    invariant: str  # atomicity | consistency | translatability | traceability
    message: str


def validate_fact(fact: AtomicFact, registry: ConceptRegistry,
                  record_exists: Optional[Callable[[str], bool]] = None,
                  scheme_exists: Optional[Callable[[str], bool]] = None) -> list[Violation]:
    """Check a fact against the storage invariants; returns every violation
    found (empty report means canonical). Validation never raises.
    """
    report: list[Violation] = []

    if not fact.source_record_id:
        report.append(Violation("traceability", "missing source_record_id"))
    elif record_exists is not None and not record_exists(fact.source_record_id):
        report.append(Violation("traceability", f"source record {fact.source_record_id} does not exist"))
    if not fact.translator_id or fact.translator_version is None:
        report.append(Violation("traceability", "missing translator identity"))

    if fact.concept not in registry:
        report.append(Violation("consistency", f"unknown concept {fact.concept!r}"))
        return report
    cdef = registry.get(fact.concept)

    if fact.value_kind is not cdef.value_kind:
        report.append(Violation(
            "consistency",
            f"{fact.concept} must be stored as {cdef.value_kind.value}, got {fact.value_kind.value}"))

    value = fact.value
    kind = fact.value_kind
    if value is not None:
        type_ok = {
            ValueKind.NUMBER: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
            ValueKind.BOOLEAN: lambda v: isinstance(v, bool),
            ValueKind.TEXT_CHOICE: lambda v: isinstance(v, str),
            ValueKind.TIMESTAMP: lambda v: isinstance(v, int) and not isinstance(v, bool),
            ValueKind.SERIES_REF: lambda v: isinstance(v, str),
        }[kind](value)
        if not type_ok:
            report.append(Violation(
                "consistency", f"value {value!r} is not a canonical {kind.value} representation"))
        elif kind is ValueKind.TEXT_CHOICE and cdef.choices and value not in cdef.choices:
            report.append(Violation(
                "atomicity", f"{value!r} is not in the declared choice list for {fact.concept}"))
    elif kind is not ValueKind.BOOLEAN:
        # Only boolean concepts carry an explicit null (inconclusive != missing).
        report.append(Violation("atomicity", f"null value is only canonical for boolean concepts"))

    if cdef.value_kind is ValueKind.TEXT_CHOICE:
        has_scheme = (registry.default_scheme(fact.concept) is not None
                      or (scheme_exists is not None and scheme_exists(fact.concept)))
        if not has_scheme:
            report.append(Violation(
                "translatability", f"text-choice concept {fact.concept} has no registered mapping scheme"))
    if cdef.value_kind is ValueKind.NUMBER:
        if cdef.unit is None:
            report.append(Violation(
                "translatability", f"number concept {fact.concept} has no canonical unit"))
        elif fact.unit != cdef.unit:
            report.append(Violation(
                "consistency", f"{fact.concept} unit must be {cdef.unit!r}, got {fact.unit!r}"))

    return report
