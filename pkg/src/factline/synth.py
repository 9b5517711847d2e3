"""Statistically calibrated synthetic EHR.

Generates random-but-realistic raw records per source category and answers
paged queries like a real EHR resource. Category profiles carry string-length
statistics (mean/std) and frequency-ranked vocabularies calibrated from sample
corpora; generation is deterministic for a fixed (profiles, seed) and every
patient is regenerable in isolation from the run master seed + patient index.

With malformed_fraction = 0 every generated row parses cleanly through the
shipped translators, so pipeline benchmarks measure processing rate rather
than QA/QC churn.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import compounds
from .errors import EmptySample, UnknownCategory
from .model import parse_ts, render_ts

DAY_MS = 86_400_000


@dataclass(frozen=True)
class CategoryProfile:
    """Statistical shape of one source table/stream."""

    category: str
    string_len_mean: float
    string_len_std: float
    vocabulary: tuple[tuple[str, float], ...]  # ranked most to least common
    entries_per_patient: tuple[int, int]
    value_model: str  # token-sequence | numeric-with-range | compound-template
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        lo, hi = self.entries_per_patient
        if lo > hi:
            raise ValueError(f"{self.category}: entries_per_patient low > high")
        total = sum(w for _, w in self.vocabulary)
        if self.vocabulary and abs(total - 1.0) > 1e-6:
            raise ValueError(f"{self.category}: vocabulary weights sum to {total}, expected 1")


@dataclass(frozen=True)
class GenRow:
    """One generated raw row plus ground truth kept for tests and QA checks."""

    idx: int
    category: str
    payload: str
    effective_ms: int
    malformed: bool = False
    clean_payload: Optional[str] = None
    waveform_seed: Optional[int] = None
    waveform_samples: int = 0


@dataclass(frozen=True)
class SyntheticPatient:
    patient_id: str
    seed: int
    records: dict[str, list[GenRow]]

    def total_entries(self) -> int:
        return sum(len(rows) for rows in self.records.values())


def load_profiles(name_or_path: str | Path = "desk") -> dict:
    """Load a generation profile: a packaged name ('desk', 'paper') or a path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    return json.loads(
        resources.files("factline").joinpath(f"config/profiles/{name_or_path}.json").read_text())


def profiles_from_config(config: dict) -> dict[str, CategoryProfile]:
    out = {}
    for name, cat in config["categories"].items():
        extra = {k: v for k, v in cat.items()
                 if k not in ("value_model", "per_patient", "vocabulary",
                              "string_len_mean", "string_len_std")}
        out[name] = CategoryProfile(
            category=name,
            string_len_mean=float(cat.get("string_len_mean", 0.0)),
            string_len_std=float(cat.get("string_len_std", 0.0)),
            vocabulary=tuple((t, float(w)) for t, w in cat["vocabulary"]),
            entries_per_patient=tuple(cat["per_patient"]),
            value_model=cat["value_model"],
            extra=extra,
        )
    return out


def calibrate(category: str, sample: Sequence[str], value_model: str = "token-sequence",
              entries_per_patient: tuple[int, int] = (1, 1)) -> CategoryProfile:
    """Build a profile whose mean/std equal the sample's string-length
    statistics and whose vocabulary is ranked by descending token frequency.
    """
    if not sample:
        raise EmptySample(category)
    lengths = [len(s) for s in sample]
    n = len(lengths)
    mean = sum(lengths) / n
    std = math.sqrt(sum((x - mean) ** 2 for x in lengths) / n)
    counts: dict[str, int] = {}
    for s in sample:
        for token in s.split():
            counts[token] = counts.get(token, 0) + 1
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return CategoryProfile(
        category=category,
        string_len_mean=mean,
        string_len_std=std,
        vocabulary=tuple((t, c / total) for t, c in ranked),
        entries_per_patient=entries_per_patient,
        value_model=value_model,
    )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def patient_id_for(index: int) -> str:
    return f"pt-{index:06d}"


def patient_seed(master_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"patient|{master_seed}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _weighted(rng: random.Random, pairs: Sequence[tuple[str, float]]) -> str:
    return rng.choices([t for t, _ in pairs], weights=[w for _, w in pairs], k=1)[0]


def _target_length(rng: random.Random, mean: float, std: float) -> int:
    if mean <= 0:
        return 0
    upper = 10.0 * mean
    draw = rng.gauss(mean, std)
    return int(round(min(max(draw, 1.0), upper)))


def _row_ts(rng: random.Random, base_ms: int, span_ms: int) -> int:
    return base_ms + rng.randrange(span_ms)


def _gen_vitals(rng: random.Random, profile: CategoryProfile, ts: int) -> str:
    name = _weighted(rng, profile.vocabulary)
    spec = profile.extra["numeric"][name]
    lo, hi = spec["range"]
    canonical = rng.uniform(lo, hi)
    unit = _weighted(rng, [tuple(u) for u in spec["units"]])
    conv = _UNIT_CONVERSIONS[unit]
    source_value = (canonical - conv["offset"]) / conv["scale"]
    rendered = f"{source_value:.{spec['decimals']}f}"
    return f"{name}|{rendered}|{unit}|{render_ts(ts)}"


def _gen_labs(rng: random.Random, profile: CategoryProfile, ts: int) -> str:
    test = _weighted(rng, profile.vocabulary)
    result = _weighted(rng, [tuple(r) for r in profile.extra["results"][test]])
    return f"{test}|{result}|{render_ts(ts)}"


def _gen_encounter(rng: random.Random, profile: CategoryProfile, ts: int) -> str:
    event = _weighted(rng, profile.vocabulary)
    return f"{event}|{render_ts(ts)}"


def _gen_medication(rng: random.Random, profile: CategoryProfile, ts: int) -> str:
    lo, hi = profile.extra.get("ingredients_per_compound", [1, 3])
    k = rng.randint(lo, hi)
    names: list[str] = []
    while len(names) < k:
        name = _weighted(rng, profile.vocabulary)
        if name not in names:
            names.append(name)
    doses = []
    for _ in names:
        mg = rng.choice(profile.extra["doses"])
        unit = _weighted(rng, [tuple(u) for u in profile.extra["dose_units"]])
        num, den = compounds.DOSE_UNITS[unit]
        doses.append((mg * den / num, unit))
    form = _weighted(rng, [tuple(f) for f in profile.extra["forms"]])
    return f"{compounds.render_raw(names, doses, form)}|{render_ts(ts)}"


def _gen_diagnosis(rng: random.Random, profile: CategoryProfile, ts: int) -> str:
    code = _weighted(rng, profile.vocabulary)
    ts_text = render_ts(ts)
    target = _target_length(rng, profile.string_len_mean, profile.string_len_std)
    desc_len = max(target - len(code) - len(ts_text) - 2, 0)
    words: list[str] = []
    while len(" ".join(words)) < desc_len:
        words.append(_weighted(rng, [tuple(w) for w in profile.extra["description_words"]]))
    desc = " ".join(words)[:desc_len]
    return f"{code}|{desc}|{ts_text}"


def _gen_waveform_row(rng: random.Random, profile: CategoryProfile, ts: int,
                      patient_id: str, idx: int, seed: int) -> tuple[str, int, int]:
    kind = _weighted(rng, profile.vocabulary)
    lo, hi = profile.extra["samples_per_row"]
    n = rng.randint(lo, hi)
    hz = profile.extra["sample_rate_hz"]
    wf_seed = rng.getrandbits(32)
    # seed-scoped key: distinct corpora never collide in the blob store
    key = f"synthetic/{seed:016x}/{patient_id}/{idx}.f32"
    payload = f"{kind}|{hz}|{n}|{key}|{render_ts(ts)}"
    return payload, wf_seed, n


def waveform_bytes(wf_seed: int, n_samples: int, hz: int = 300) -> bytes:
    """Deterministic pseudo-ECG trace: a periodic spike train plus noise."""
    gen = np.random.default_rng(wf_seed)
    t = np.arange(n_samples, dtype=np.float32) / float(hz)
    signal = np.sin(2 * np.pi * 1.2 * t).astype(np.float32)
    signal += (0.15 * gen.standard_normal(n_samples)).astype(np.float32)
    return signal.tobytes()


def _corrupt(rng: random.Random, category: str, payload: str) -> Optional[str]:
    """Make a payload unparseable or clinically absurd; None if the category
    has no corruption mode (row stays clean).
    """
    fields = payload.split("|")
    if category == "vitals":
        if rng.random() < 0.5:
            digits = fields[1]
            cut = max(1, len(digits) // 2)
            fields[1] = digits[:cut] + " " + digits[cut:]  # "99 9": unparseable number
        else:
            try:
                fields[1] = f"{float(fields[1]) * 100:.1f}"  # far out of expected range
            except ValueError:
                return None
        return "|".join(fields)
    if category == "labs":
        fields[1] = "??" + fields[1]
        return "|".join(fields)
    if category == "diagnoses":
        fields[0] = "9" + fields[0]
        return "|".join(fields)
    if category == "medications":
        return "ZZZIMAGINED-" + payload
    return None


_GENERATORS = {
    "vitals": _gen_vitals,
    "labs": _gen_labs,
    "encounters": _gen_encounter,
    "medications": _gen_medication,
    "diagnoses": _gen_diagnosis,
}


def _load_unit_conversions() -> dict:
    knowledge = json.loads(
        resources.files("factline").joinpath("config/translators/vitals.json").read_text())
    return knowledge["knowledge"]["unit_conversions"]


_UNIT_CONVERSIONS = _load_unit_conversions()


def generate_patient(profiles: dict[str, CategoryProfile], seed: int,
                     patient_id: str = "pt-000000",
                     timeline: Optional[dict] = None,
                     malformed_fraction: float = 0.0,
                     entries_range: Optional[tuple[int, int]] = None) -> SyntheticPatient:
    """Generate one patient deterministically from (profiles, seed)."""
    rng = random.Random(seed)
    timeline = timeline or {"start": "2019-01-01T00:00:00Z",
                            "end": "2023-06-30T00:00:00Z", "span_days": 420}
    t_start = parse_ts(timeline["start"])
    t_end = parse_ts(timeline["end"])
    span_ms = int(timeline["span_days"]) * DAY_MS
    base_ms = t_start + rng.randrange(max(t_end - t_start - span_ms, 1))

    records: dict[str, list[GenRow]] = {}
    idx = 0
    for category in sorted(profiles):
        profile = profiles[category]
        lo, hi = profile.entries_per_patient
        count = rng.randint(lo, hi)
        rows: list[GenRow] = []
        for _ in range(count):
            ts = _row_ts(rng, base_ms, span_ms)
            if category == "waveforms":
                payload, wf_seed, n = _gen_waveform_row(rng, profile, ts, patient_id, idx, seed)
                rows.append(GenRow(idx=idx, category=category, payload=payload,
                                   effective_ms=ts, waveform_seed=wf_seed, waveform_samples=n))
            else:
                payload = _GENERATORS[category](rng, profile, ts)
                malformed = False
                clean = None
                if malformed_fraction > 0 and rng.random() < malformed_fraction:
                    corrupted = _corrupt(rng, category, payload)
                    if corrupted is not None:
                        clean, payload, malformed = payload, corrupted, True
                rows.append(GenRow(idx=idx, category=category, payload=payload,
                                   effective_ms=ts, malformed=malformed, clean_payload=clean))
            idx += 1
        records[category] = rows

    patient = SyntheticPatient(patient_id=patient_id, seed=seed, records=records)
    if entries_range is not None:
        lo, hi = entries_range
        total = patient.total_entries()
        if not lo <= total <= hi:
            raise AssertionError(
                f"{patient_id}: {total} entries outside configured range [{lo}, {hi}]")
    return patient


class SyntheticSource:
    """A queryable synthetic EHR over a fixed patient population.

    Patients materialize on demand from id-derived seeds, so any worker can
    re-generate any patient without shared state.
    """

    def __init__(self, config: dict, master_seed: int, patient_count: int,
                 malformed_fraction: Optional[float] = None) -> None:
        self.config = config
        self.profiles = profiles_from_config(config)
        self.master_seed = master_seed
        self.patient_count = patient_count
        self.malformed_fraction = (config.get("malformed_fraction", 0.0)
                                   if malformed_fraction is None else malformed_fraction)
        # bounded cache: staging walks patients in order, and any patient can
        # be regenerated from its id-derived seed, so eviction is free; the
        # bound must cover one pull shard or paging re-generates every page
        self._cache: "OrderedDict[int, SyntheticPatient]" = OrderedDict()
        self._cache_limit = 128

    @property
    def source_id(self) -> str:
        return f"synthetic-ehr[{self.master_seed}]"

    def patient_ids(self) -> list[str]:
        return [patient_id_for(i) for i in range(self.patient_count)]

    def categories(self) -> list[str]:
        return sorted(self.profiles)

    def patient(self, index: int) -> SyntheticPatient:
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        patient = generate_patient(
            self.profiles, patient_seed(self.master_seed, index),
            patient_id=patient_id_for(index),
            timeline=self.config.get("timeline"),
            malformed_fraction=self.malformed_fraction,
            entries_range=tuple(self.config["entries_per_patient"]),
        )
        self._cache[index] = patient
        while len(self._cache) > self._cache_limit:
            self._cache.popitem(last=False)
        return patient

    def reserve_cache(self, patients: int) -> None:
        """Grow the cache bound to cover one pull shard; paging over a shard
        larger than the cache would regenerate every patient per page."""
        self._cache_limit = max(self._cache_limit, patients)

    def trim_cache(self, limit: int = 16) -> None:
        """Release generated patients (stateless workers stay constant-memory
        across corpus sizes; anything evicted is regenerable from its seed)."""
        self._cache_limit = max(limit, 1)
        while len(self._cache) > self._cache_limit:
            self._cache.popitem(last=False)

    def patient_by_id(self, patient_id: str) -> SyntheticPatient:
        index = int(patient_id.split("-")[1])
        return self.patient(index)

    def query(self, patient_ids: Sequence[str], categories: Optional[Sequence[str]] = None,
              page_size: int = 500, page_token: Optional[str] = None) -> dict:
        """Raw result pages in the shape the ingestion controller consumes.
        Ordering is (patient, category, row index); pagination is stable.
        """
        categories = list(categories) if categories else self.categories()
        for cat in categories:
            if cat not in self.profiles:
                raise UnknownCategory(cat)
        offset = int(page_token) if page_token else 0

        rows: list[dict] = []
        position = 0
        next_token: Optional[str] = None
        for pid in patient_ids:
            patient = self.patient_by_id(pid)
            for cat in sorted(categories):
                for row in patient.records.get(cat, []):
                    if position < offset:
                        position += 1
                        continue
                    if len(rows) == page_size:
                        next_token = str(position)
                        return {"rows": rows, "next": next_token}
                    public = {"patient_id": pid, "category": cat,
                              "idx": row.idx, "payload": row.payload}
                    if row.waveform_seed is not None:
                        data = waveform_bytes(row.waveform_seed, row.waveform_samples,
                                              self.profiles[cat].extra["sample_rate_hz"])
                        public["attachment_b64"] = base64.b64encode(data).decode()
                    rows.append(public)
                    position += 1
        return {"rows": rows, "next": None}

    def iter_rows(self, patient_ids: Sequence[str],
                  categories: Optional[Sequence[str]] = None,
                  page_size: int = 500) -> Iterable[list[dict]]:
        token = None
        while True:
            page = self.query(patient_ids, categories, page_size, token)
            if page["rows"]:
                yield page["rows"]
            token = page["next"]
            if token is None:
                return

    # -- ground truth for tests -------------------------------------------------

    def malformed_rows(self, patient_ids: Optional[Sequence[str]] = None) -> list[tuple[str, GenRow]]:
        ids = patient_ids if patient_ids is not None else self.patient_ids()
        out = []
        for pid in ids:
            patient = self.patient_by_id(pid)
            for rows in patient.records.values():
                out.extend((pid, r) for r in rows if r.malformed)
        return out
