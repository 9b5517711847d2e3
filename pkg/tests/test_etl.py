import pytest

from factline import compounds, etl, qaqc
from factline.errors import NoNewerVersion
from factline.model import SourceKind, SourceRecord, ValueKind, render_ts, utc_now_ms

TS = "2021-03-02T08:00:00.000Z"


def _record(category, payload, rid="r1", patient="p1"):
    return SourceRecord(record_id=rid, patient_id=patient,
                        source_kind=SourceKind.SYNTHETIC_EHR, category=category,
                        payload=payload, received_at=0, batch_id="b1")


def _config(deployment, translator_id):
    return etl.load_translator_config(deployment.warehouse, translator_id)


class TestMedicationTranslator:
    def test_compound_decomposition_matches_published_example(self, deployment):
        record = _record("medications",
                         f"BUTALBITAL-ASPIRIN-CAFFEINE 50 MG-325 MG-40 MG CAPSULE|{TS}")
        result = etl.translate_row(record, _config(deployment, "medications"),
                                   deployment.registry)
        assert not result.flags
        doses = [(f.concept.removeprefix("medication."), f.value, f.unit)
                 for f in result.facts if f.value_kind is ValueKind.NUMBER]
        assert doses == [("aspirin", 325, "mg"), ("butalbital", 50, "mg"),
                         ("caffeine", 40, "mg")]
        assert len({f.group_key for f in result.facts}) == 1
        form = [f for f in result.facts if f.concept == "medication.form"]
        assert form[0].value == "capsule"

    def test_reassembly_reproduces_normalized_compound(self, deployment):
        raw = "CAFFEINE-ASPIRIN 40 MG-0.325 G TABLET"
        record = _record("medications", f"{raw}|{TS}")
        result = etl.translate_row(record, _config(deployment, "medications"),
                                   deployment.registry)
        rebuilt = compounds.render(compounds.Compound(
            tuple(compounds.Ingredient(f.concept.removeprefix("medication."), f.value)
                  for f in result.facts if f.value_kind is ValueKind.NUMBER),
            next(f.value for f in result.facts if f.concept == "medication.form")))
        assert rebuilt == compounds.normalize(raw)

    def test_unknown_ingredient_flags_qa(self, deployment):
        record = _record("medications", f"NOTADRUG 10 MG TABLET|{TS}")
        result = etl.translate_row(record, _config(deployment, "medications"),
                                   deployment.registry)
        assert not result.facts
        assert result.flags[0].reason == "unparseable"


class TestVitalsTranslator:
    def test_pound_to_kilogram_conversion(self, deployment):
        # oracle: hand multiplication, 154.32 lb x 0.45359237 kg/lb
        expected_kg = 154.32 * 0.45359237
        record = _record("vitals", f"weight|154.32|lb|{TS}")
        result = etl.translate_row(record, _config(deployment, "vitals"), deployment.registry)
        fact = result.facts[0]
        assert fact.concept == "weight" and fact.unit == "kg"
        assert fact.value == pytest.approx(expected_kg, rel=1e-12)

    def test_fahrenheit_to_celsius(self, deployment):
        record = _record("vitals", f"temperature|98.6|F|{TS}")
        result = etl.translate_row(record, _config(deployment, "vitals"), deployment.registry)
        assert result.facts[0].value == pytest.approx((98.6 - 32) * 5 / 9, rel=1e-9)

    def test_extreme_value_withheld(self, deployment):
        record = _record("vitals", f"heart_rate|999|bpm|{TS}")
        result = etl.translate_row(record, _config(deployment, "vitals"), deployment.registry)
        assert not result.facts
        assert result.flags[0].reason == "out-of-range" and result.flags[0].withheld

    def test_moderate_deviation_stored_but_flagged(self, deployment):
        # expected heart-rate range is [20, 300]; 2x threshold withholds beyond 600
        record = _record("vitals", f"heart_rate|450|bpm|{TS}")
        result = etl.translate_row(record, _config(deployment, "vitals"), deployment.registry)
        assert result.facts and result.flags
        assert not result.flags[0].withheld

    def test_garbled_number_unparseable(self, deployment):
        record = _record("vitals", f"heart_rate|99 9|bpm|{TS}")
        result = etl.translate_row(record, _config(deployment, "vitals"), deployment.registry)
        assert not result.facts and result.flags[0].reason == "unparseable"


class TestLabsTranslator:
    @pytest.mark.parametrize("raw,expected", [("Pos", True), ("Negative", False),
                                              ("inconclusive", None)])
    def test_boolean_canonicalization(self, deployment, raw, expected):
        record = _record("labs", f"covid19_result|{raw}|{TS}")
        result = etl.translate_row(record, _config(deployment, "labs"), deployment.registry)
        fact = result.facts[0]
        assert fact.value_kind is ValueKind.BOOLEAN and fact.value is expected

    def test_choice_canonicalized_case_insensitively(self, deployment):
        record = _record("labs", f"smoking_status|FORMER|{TS}")
        result = etl.translate_row(record, _config(deployment, "labs"), deployment.registry)
        assert result.facts[0].value == "former"

    def test_unrecognized_result_flagged(self, deployment):
        record = _record("labs", f"covid19_result|??Pos|{TS}")
        result = etl.translate_row(record, _config(deployment, "labs"), deployment.registry)
        assert not result.facts and result.flags


class TestDiagnosesAndEncountersAndWaveforms:
    def test_icd10_extraction(self, deployment):
        record = _record("diagnoses", f"O10.1|pre-existing hypertension|{TS}")
        result = etl.translate_row(record, _config(deployment, "diagnoses"),
                                   deployment.registry)
        assert result.facts[0].value == "O10.1"

    def test_invalid_code_flagged(self, deployment):
        record = _record("diagnoses", f"9O10.1|garbled|{TS}")
        result = etl.translate_row(record, _config(deployment, "diagnoses"),
                                   deployment.registry)
        assert not result.facts and result.flags[0].reason == "unparseable"

    def test_admission_timestamp_fact(self, deployment):
        record = _record("encounters", f"admission|{TS}")
        result = etl.translate_row(record, _config(deployment, "encounters"),
                                   deployment.registry)
        fact = result.facts[0]
        assert fact.concept == "encounter.admission"
        assert render_ts(fact.value) == TS

    def test_waveform_series_ref_with_interval(self, deployment):
        record = _record("waveforms", f"ecg|300|600|synthetic/x/pt-000000/5.f32|{TS}")
        result = etl.translate_row(record, _config(deployment, "waveforms"),
                                   deployment.registry)
        fact = result.facts[0]
        assert fact.value_kind is ValueKind.SERIES_REF
        assert fact.value == "waveforms/synthetic/x/pt-000000/5.f32"
        start, end = fact.effective_time
        assert end - start == 2000  # 600 samples at 300 Hz


class TestDeterminism:
    def test_translate_row_is_pure(self, deployment):
        record = _record("medications", f"ASPIRIN-CAFFEINE 325 MG-40 MG TABLET|{TS}")
        config = _config(deployment, "medications")
        assert (etl.translate_row(record, config, deployment.registry)
                == etl.translate_row(record, config, deployment.registry))

    def test_no_fact_text_contains_compound_delimiter(self, deployment):
        record = _record("medications", f"ASPIRIN-CAFFEINE 325 MG-40 MG TABLET|{TS}")
        result = etl.translate_row(record, _config(deployment, "medications"),
                                   deployment.registry)
        for fact in result.facts:
            if isinstance(fact.value, str):
                assert "-" not in fact.value

    def test_version_propagates_to_facts(self, deployment):
        etl.bump_translator_version(deployment.warehouse, "vitals")
        config = _config(deployment, "vitals")
        assert config.version == 2
        record = _record("vitals", f"heart_rate|70|bpm|{TS}")
        result = etl.translate_row(record, config, deployment.registry)
        assert result.facts[0].translator_version == 2


def _ingest_rows(deployment, rows, category):
    """Stage explicit payloads as a batch and return its id."""
    from factline import ingest as ing
    from factline.model import SourceRecord

    batch_id = ing.create_batch(deployment.warehouse, source="test")
    records, memberships = [], []
    for i, (patient, payload) in enumerate(rows):
        records.append(SourceRecord(
            record_id=ing.record_id_for("synthetic-ehr", patient, i, payload),
            patient_id=patient, source_kind=SourceKind.SYNTHETIC_EHR, category=category,
            payload=payload, received_at=utc_now_ms(), batch_id=batch_id))
        memberships.append((category, i))
    deployment.warehouse.insert_source_records(records, batch_id=batch_id,
                                               memberships=memberships)
    ing.finish_staging(deployment.warehouse, batch_id, len(records))
    ing.split_request(deployment.warehouse, deployment.broker, batch_id)
    return batch_id


class TestWorkerAndReprocess:
    def test_clean_block_produces_facts_and_no_qa(self, deployment):
        rows = [("p1", f"heart_rate|{60 + i}|bpm|{TS}") for i in range(20)]
        _ingest_rows(deployment, rows, "vitals")
        deployment.run_until_idle()
        assert deployment.warehouse.fact_count() == 20
        assert qaqc.list_qa(deployment.warehouse) == []

    def test_halted_translator_consumes_nothing(self, deployment):
        rows = [("p1", f"heart_rate|{60 + i}|bpm|{TS}") for i in range(10)]
        _ingest_rows(deployment, rows, "vitals")
        qaqc.halt(deployment.warehouse, "vitals", signer="ops", origin="admin")
        deployment.run_until_idle()
        assert deployment.broker.depth("etl.vitals")[0] == 1  # one block, untouched
        qaqc.resume(deployment.warehouse, "vitals", signer="ops")
        deployment.run_until_idle()
        assert deployment.warehouse.fact_count() == 10

    def test_crash_and_redelivery_matches_serial_run(self, tmp_path, deployment):
        from factline.deploy import Deployment

        rows = [("p1", f"BUTALBITAL-ASPIRIN-CAFFEINE 50 MG-325 MG-40 MG CAPSULE|{TS}"),
                ("p2", f"ASPIRIN 81 MG TABLET|{TS}"),
                ("p3", f"CAFFEINE-CODEINE 40 MG-25 MG SOLUTION|{TS}")]

        serial = Deployment(tmp_path / "serial")
        _ingest_rows(serial, rows, "medications")
        serial.run_until_idle()

        _ingest_rows(deployment, rows, "medications")
        crashes = iter([True, False, False, False])  # first delivery dies and requeues
        deployment.run_worker(fail_hook=lambda env: next(crashes, False))
        assert deployment.warehouse.state_hash() == serial.warehouse.state_hash()

    def test_reprocess_supersedes_old_versions(self, deployment):
        rows = [("p1", f"weight|100.0|kg|{TS}")]
        _ingest_rows(deployment, rows, "vitals")
        deployment.run_until_idle()
        before = deployment.warehouse.facts_for_concept("weight")
        assert before[0].translator_version == 1

        config = etl.load_translator_config(deployment.warehouse, "vitals")
        etl.bump_translator_version(deployment.warehouse, "vitals", config.knowledge)
        etl.reprocess(deployment.warehouse, deployment.broker, "vitals", from_version=2)
        deployment.run_until_idle()

        active = deployment.warehouse.facts_for_concept("weight")
        assert [f.translator_version for f in active] == [2]
        all_versions = {r[0] for r in deployment.warehouse.query(
            "SELECT translator_version FROM facts WHERE concept = 'weight'")}
        assert all_versions == {1, 2}  # superseded facts carry the old version

        state = deployment.warehouse.state_hash()
        etl.reprocess(deployment.warehouse, deployment.broker, "vitals", from_version=2)
        deployment.run_until_idle()
        assert deployment.warehouse.state_hash() == state  # double reprocess: no-op

    def test_reprocess_requires_newer_version(self, deployment):
        with pytest.raises(NoNewerVersion):
            etl.reprocess(deployment.warehouse, deployment.broker, "vitals", from_version=99)

    def test_reprocess_with_no_data_is_empty_batch(self, deployment):
        etl.bump_translator_version(deployment.warehouse, "vitals")
        batch_id = etl.reprocess(deployment.warehouse, deployment.broker, "vitals",
                                 from_version=2)
        row = deployment.warehouse.one("SELECT staged_rows FROM batches WHERE batch_id = ?",
                                       (batch_id,))
        assert row[0] == 0
